"""Minimal parameter container used by every layer."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from tranet.numcore.tensor import Parameter, get_dtype


class Module:
    """Base class that discovers parameters and child modules from attributes.

    A subclass may set ``namespace``; parameters owned by it (and its children)
    are then reported as ``"<namespace>.<path>"``.
    """

    namespace: str | None = None

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}{i}", item

    def named_parameters(self, prefix: str = "", _ns: str | None = None) -> Iterator[tuple[str, Parameter]]:
        ns = _ns or self.namespace
        for name, value in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield (f"{ns}.{path}" if ns else path), value
            else:
                yield from value.named_parameters(path, ns)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(get_dtype(), copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError
