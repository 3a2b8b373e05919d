"""Learnable-parameter census (the frozen backbone is excluded)."""

from __future__ import annotations

from dataclasses import dataclass

from .nn import Module


@dataclass
class Census:
    per_module: dict[str, int]
    per_tensor: dict[str, int]
    total: int

    def table(self) -> str:
        width = max([len(k) for k in self.per_module] + [5])
        lines = [f"{name:<{width}}  {count:>9,d}" for name, count in self.per_module.items()]
        lines.append(f"{'total':<{width}}  {self.total:>9,d}")
        return "\n".join(lines)


def count_parameters(model: Module, breakdown: bool = True) -> Census:
    """Counts keyed by top-level submodule; tensor names match checkpoint names."""
    per_tensor = {n: p.size for n, p in model.learnable()}
    per_module: dict[str, int] = {}
    if breakdown:
        for name, n in per_tensor.items():
            top = name.split(".")[0]
            per_module[top] = per_module.get(top, 0) + n
    return Census(per_module, per_tensor, sum(per_tensor.values()))


def conv_parameter_count(module: Module) -> int:
    """Convolution weights and biases only (normalization affines excluded)."""
    return sum(
        p.size for n, p in module.named_parameters()
        if n.endswith("conv.weight") or n.endswith("conv.bias")
    )
