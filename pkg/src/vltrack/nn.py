"""Parameter containers and the layers built from :mod:`vltrack.ops`."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import CheckpointError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers, train/eval flag, state dicts.

    Children are discovered from instance attributes in assignment order, so
    parameter names are stable across runs.
    """

    training = True
    _buffer_names: tuple = ()

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(v, Parameter):
                yield full, v
            elif isinstance(v, Module):
                yield from v.named_parameters(full)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for mname, m in self.named_modules(prefix):
            for b in m._buffer_names:
                yield (f"{mname}.{b}" if mname else b), m, b

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m, b in self.named_buffers():
            setattr(m, b, getattr(m, b).astype(dtype))
        return self

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        for name, m, b in self.named_buffers():
            out[name] = getattr(m, b)
        return out

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        bufs = {name: (m, b) for name, m, b in self.named_buffers()}
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(arr.shape):
                    raise CheckpointError(f"shape mismatch for parameter {name!r}: checkpoint {arr.shape}, model {p.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            elif name in bufs:
                m, b = bufs[name]
                cur = getattr(m, b)
                if cur.shape != tuple(arr.shape):
                    raise CheckpointError(f"shape mismatch for buffer {name!r}: checkpoint {arr.shape}, model {cur.shape}")
                setattr(m, b, np.array(arr, dtype=cur.dtype))
            elif strict:
                raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
        if strict:
            missing = (set(params) | set(bufs)) - set(state)
            if missing:
                raise CheckpointError(f"checkpoint lacks parameter {sorted(missing)[0]!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, groups=1, bias=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.weight = Parameter(_kaiming(rng, (cout, cin // groups, k, k), (cin // groups) * k * k))
        if bias:
            self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.num_batches_tracked = 0

    def reset_running_stats(self):
        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.ones_like(self.running_var)
        self.num_batches_tracked = 0

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self, self.training, self.eps)


class Linear(Module):
    def __init__(self, cin, cout, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(rng.uniform(-bound, bound, (cout, cin)))
        if bias:
            self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.linear(x, self.weight, getattr(self, "bias", None))


class ConvBN(Module):
    """Conv -> BN -> optional ReLU."""

    def __init__(self, cin, cout, k, stride=1, groups=1, relu=True, rng=None):
        self.conv = Conv2d(cin, cout, k, stride=stride, groups=groups, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x
