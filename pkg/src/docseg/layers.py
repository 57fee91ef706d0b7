"""Named parameter store and the layer blocks built from the autodiff ops."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor


class ParamStore:
    """Ordered mapping of names to trainable tensors plus non-trainable
    buffers (batchnorm running statistics).

    The store is the single mutable object in a network: forward passes
    only read it, one optimizer writes it.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def create(self, name, array):
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def create_buffer(self, name, array):
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.asarray(array, dtype=np.float32)
        self._buffers[name] = arr
        return arr

    def params(self):
        return list(self._params.values())

    def names(self):
        return list(self._params.keys())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        out = {name: t.data.copy() for name, t in self._params.items()}
        out.update({name: arr.copy() for name, arr in self._buffers.items()})
        return out

    def load_state_dict(self, state):
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r} shape mismatch: checkpoint {arr.shape} vs model {t.data.shape}"
                )
            t.data = arr.copy()
        for name, buf in self._buffers.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing buffer {name!r}")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != buf.shape:
                raise ValueError(
                    f"buffer {name!r} shape mismatch: checkpoint {arr.shape} vs model {buf.shape}"
                )
            buf[...] = arr

    def content_hash(self):
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].data.tobytes())
        for name in sorted(self._buffers):
            h.update(name.encode())
            h.update(self._buffers[name].tobytes())
        return h.hexdigest()


def kaiming_conv(rng, out_maps, in_maps, kh, kw):
    fan_in = in_maps * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(out_maps, in_maps, kh, kw)).astype(np.float32)


class ConvBlock:
    """Convolution with optional batchnorm and activation, per layer row."""

    def __init__(self, store, prefix, spec: ConvSpec, rng):
        self.spec = spec
        self.weight = store.create(
            f"{prefix}.w", kaiming_conv(rng, spec.out_maps, spec.in_maps, spec.kernel_h, spec.kernel_w)
        )
        self.bias = store.create(f"{prefix}.b", np.zeros(spec.out_maps, dtype=np.float32))
        if spec.has_batchnorm:
            self.gamma = store.create(f"{prefix}.bn.g", np.ones(spec.out_maps, dtype=np.float32))
            self.beta = store.create(f"{prefix}.bn.b", np.zeros(spec.out_maps, dtype=np.float32))
            self.run_mean = store.create_buffer(f"{prefix}.bn.mean", np.zeros(spec.out_maps, dtype=np.float32))
            self.run_var = store.create_buffer(f"{prefix}.bn.var", np.ones(spec.out_maps, dtype=np.float32))

    def __call__(self, x, training):
        s = self.spec
        out = ad.conv2d(
            x,
            self.weight,
            self.bias,
            stride=(s.stride_h, s.stride_w),
            padding=(s.pad_h, s.pad_w),
            dilation=(s.dilation_h, s.dilation_w),
        )
        if s.has_batchnorm:
            out = ad.batchnorm2d(out, self.gamma, self.beta, self.run_mean, self.run_var, training)
        if s.activation == "relu":
            out = ad.relu(out)
        elif s.activation == "sigmoid":
            out = ad.sigmoid(out)
        return out


class RectConvPair:
    """The early detector layers: half the maps convolve with a wide 3x7
    kernel, the other half with a tall 7x3 kernel, concatenated before a
    shared batchnorm and ReLU."""

    def __init__(self, store, prefix, in_maps, out_maps, rng, split=0.5):
        wide_maps = int(round(out_maps * split))
        tall_maps = out_maps - wide_maps
        if wide_maps < 1 or tall_maps < 1:
            raise ValueError(f"rect split {split} leaves an empty kernel group for {out_maps} maps")
        self.wide = ConvBlock(
            store,
            f"{prefix}.wide",
            ConvSpec(in_maps, wide_maps, 3, 7, pad_h=1, pad_w=3, has_batchnorm=False, activation="none"),
            rng,
        )
        self.tall = ConvBlock(
            store,
            f"{prefix}.tall",
            ConvSpec(in_maps, tall_maps, 7, 3, pad_h=3, pad_w=1, has_batchnorm=False, activation="none"),
            rng,
        )
        self.out_maps = out_maps
        self.gamma = store.create(f"{prefix}.bn.g", np.ones(out_maps, dtype=np.float32))
        self.beta = store.create(f"{prefix}.bn.b", np.zeros(out_maps, dtype=np.float32))
        self.run_mean = store.create_buffer(f"{prefix}.bn.mean", np.zeros(out_maps, dtype=np.float32))
        self.run_var = store.create_buffer(f"{prefix}.bn.var", np.ones(out_maps, dtype=np.float32))

    def __call__(self, x, training):
        out = ad.concat([self.wide(x, training), self.tall(x, training)], axis=1)
        out = ad.batchnorm2d(out, self.gamma, self.beta, self.run_mean, self.run_var, training)
        return ad.relu(out)


class Dense:
    """Fully-connected head layer: flattens and applies xW + b."""

    def __init__(self, store, prefix, in_features, out_features, rng):
        std = np.sqrt(2.0 / in_features)
        self.weight = store.create(
            f"{prefix}.w", rng.normal(0.0, std, size=(in_features, out_features)).astype(np.float32)
        )
        self.bias = store.create(f"{prefix}.b", np.zeros(out_features, dtype=np.float32))
        self.in_features = in_features

    def __call__(self, x):
        flat = ad.reshape(x, (x.shape[0], -1))
        if flat.shape[1] != self.in_features:
            raise ad.ShapeError(
                f"dense layer expects {self.in_features} features, got {flat.shape[1]}"
            )
        return ad.add(ad.matmul(flat, self.weight), self.bias)
