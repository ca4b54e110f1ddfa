"""Dense arrays with reverse-mode differentiation over a fixed set of operations.

Every value an SSTA computes lives in a :class:`Tensor`. Operations are methods of
the :class:`Tape` the caller passes around; a recording tape keeps one entry per
primitive so :meth:`Tape.backward` can replay them in exact reverse order.
There is no implicit broadcasting: shape alignment is always spelled out.
"""
import itertools
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ssta.errors import CheckpointError, NonFiniteError, ShapeMismatchError, TapeError

DTYPES: Dict[str, np.dtype] = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}

_value_ids = itertools.count(1)


def resolve_dtype(name: str) -> np.dtype:
    """Map a precision name ("f64" or "f32") to its numpy dtype."""
    try:
        return DTYPES[name]
    except KeyError:
        raise ShapeMismatchError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


def dtype_code(dtype: np.dtype) -> str:
    for code, dt in DTYPES.items():
        if np.dtype(dtype).kind == "f" and np.dtype(dtype).itemsize == dt.itemsize:
            return code
    raise ShapeMismatchError(f"unsupported dtype {dtype}; only f32 and f64 tensors exist")


def _check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """A row-major block of real scalars with an identity the tape can track."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype: Optional[np.dtype] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPES["f64"])
        self.data = arr
        self.id = next(_value_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={dtype_code(self.data.dtype)})"


_Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: _Vjp


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def _conv2d_patches(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    return sliding_window_view(padded, (k, k), axis=(1, 2))  # [C_in, H, W, k, k]


def _conv2d_input_grad(g: np.ndarray, kernel: np.ndarray, in_shape: Tuple[int, ...]) -> np.ndarray:
    _, h, w = in_shape
    k = kernel.shape[2]
    p = (k - 1) // 2
    grad = np.zeros((in_shape[0], h + 2 * p, w + 2 * p), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            grad[:, a:a + h, b:b + w] += np.tensordot(kernel[:, :, a, b], g, axes=([0], [0]))
    return grad[:, p:p + h, p:p + w]


class Tape:
    """Ordered record of primitive operations and the named values to differentiate.

    ``record=False`` gives a forward-only tape for inference; such a tape rejects
    :meth:`backward`.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: List[_Record] = []
        self._watched: Dict[str, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, name: str, value) -> Tensor:
        """Designate `value` as an input whose adjoint backward() must return."""
        if name in self._watched:
            raise TapeError(f"value name {name!r} already watched on this tape")
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        self._watched[name] = tensor
        return tensor

    def constant(self, value, dtype: Optional[np.dtype] = None) -> Tensor:
        return Tensor(value, dtype=dtype)

    def _emit(self, op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, vjp: _Vjp) -> Tensor:
        _check_finite(out, op)
        result = Tensor(out)
        if self.record:
            self._records.append(_Record(op, inputs, result, vjp))
        return result

    # -- primitives -------------------------------------------------------

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
        """Same-size 2-D convolution (zero padding of (k-1)/2 on each side)."""
        xs, ks, bs = x.shape, kernel.shape, bias.shape
        if (len(xs) != 3 or len(ks) != 4 or ks[1] != xs[0] or ks[2] != ks[3]
                or ks[2] % 2 == 0 or bs != (ks[0],)):
            raise ShapeMismatchError(
                f"conv2d: input {list(xs)} does not fit kernel {list(ks)} with bias {list(bs)}"
            )
        patches = _conv2d_patches(x.data, ks[2])
        out = np.tensordot(kernel.data, patches, axes=([1, 2, 3], [0, 3, 4])) + bias.data[:, None, None]

        def vjp(g):
            return (
                _conv2d_input_grad(g, kernel.data, xs),
                np.tensordot(g, patches, axes=([1, 2], [1, 2])),
                g.sum(axis=(1, 2)),
            )

        return self._emit("conv2d", (x, kernel, bias), out, vjp)

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.data)
        return self._emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, x: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return self._emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape("add", a, b)
        return self._emit("add", (a, b), a.data + b.data, lambda g: (g, g))

    def scale(self, x: Tensor, factor: float) -> Tensor:
        """Multiply by a constant scalar."""
        return self._emit("scale", (x,), x.data * factor, lambda g: (g * factor,))

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the leading (channel) axis."""
        if not parts:
            raise ShapeMismatchError("concat: nothing to concatenate")
        tail = parts[0].shape[1:]
        for p in parts[1:]:
            if p.shape[1:] != tail:
                raise ShapeMismatchError(
                    f"concat: shapes {list(parts[0].shape)} and {list(p.shape)} differ past the channel axis"
                )
        sizes = [p.shape[0] for p in parts]
        cuts = np.cumsum(sizes)[:-1]
        out = np.concatenate([p.data for p in parts], axis=0)
        return self._emit("concat", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=0)))

    def global_average_pool(self, x: Tensor) -> Tensor:
        """[C, H, W] -> [C], mean over the spatial extent."""
        if len(x.shape) != 3:
            raise ShapeMismatchError(f"global_average_pool: expected [C, H, W], got {list(x.shape)}")
        n = x.shape[1] * x.shape[2]
        ones = np.ones_like(x.data)
        return self._emit(
            "global_average_pool", (x,), x.data.mean(axis=(1, 2)),
            lambda g: (ones * (g[:, None, None] / n),),
        )

    def dense(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """Matrix-vector product with bias: weight[m, n] @ x[n] + bias[m]."""
        if len(x.shape) != 1 or len(weight.shape) != 2 or weight.shape[1] != x.shape[0] \
                or bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(
                f"dense: input {list(x.shape)} does not fit weight {list(weight.shape)} "
                f"with bias {list(bias.shape)}"
            )
        out = weight.data @ x.data + bias.data
        return self._emit(
            "dense", (x, weight, bias), out,
            lambda g: (weight.data.T @ g, np.outer(g, x.data), g),
        )

    def broadcast_spatial(self, v: Tensor, height: int, width: int) -> Tensor:
        """[C] -> [C, height, width], the same value at every grid cell."""
        if len(v.shape) != 1:
            raise ShapeMismatchError(f"broadcast_spatial: expected [C], got {list(v.shape)}")
        out = np.repeat(np.repeat(v.data[:, None, None], height, axis=1), width, axis=2)
        return self._emit("broadcast_spatial", (v,), out, lambda g: (g.sum(axis=(1, 2)),))

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != x.data.size:
            raise ShapeMismatchError(f"reshape: {list(x.shape)} cannot become {list(shape)}")
        src = x.shape
        return self._emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))

    def sum_all(self, x: Tensor) -> Tensor:
        ones = np.ones_like(x.data)
        return self._emit("sum_all", (x,), np.asarray(x.data.sum()), lambda g: (ones * g,))

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        """Scalar inner product of two same-shape tensors."""
        _same_shape("dot", a, b)
        return self._emit("dot", (a, b), np.asarray(np.sum(a.data * b.data)),
                          lambda g: (g * b.data, g * a.data))

    def mse_loss(self, pred: Tensor, target: Tensor) -> Tensor:
        _same_shape("mse_loss", pred, target)
        diff = pred.data - target.data
        n = diff.size
        return self._emit("mse_loss", (pred, target), np.asarray(np.mean(diff * diff)),
                          lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))

    def sse_loss(self, pred: Tensor, target: Tensor) -> Tensor:
        """Squared Frobenius norm of the difference."""
        _same_shape("sse_loss", pred, target)
        diff = pred.data - target.data
        return self._emit("sse_loss", (pred, target), np.asarray(np.sum(diff * diff)),
                          lambda g: (g * 2.0 * diff, -g * 2.0 * diff))

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Tensor) -> Dict[str, Tensor]:
        """Adjoints of `loss` for every watched value, keyed by watch name."""
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if not self.record:
            raise TapeError("tape was created with record=False")
        if loss.data.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {list(loss.shape)}")
        self._consumed = True

        adjoints: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = adjoints.get(rec.output.id)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                prev = adjoints.get(inp.id)
                adjoints[inp.id] = gi if prev is None else prev + gi

        result: Dict[str, Tensor] = {}
        for name, value in self._watched.items():
            g = adjoints.get(value.id)
            arr = np.zeros_like(value.data) if g is None else np.asarray(g, dtype=value.data.dtype)
            _check_finite(arr, f"adjoint of {name}")
            result[name] = Tensor(arr)
        self._records.clear()
        return result


def backward(loss: Tensor, tape: Tape) -> Dict[str, Tensor]:
    """Run the reverse pass of `tape` from the scalar `loss`."""
    return tape.backward(loss)


class ParameterSet:
    """All trainable weights of one node in one flat buffer, addressed by named slices.

    Instances are treated as values: the optimizer produces a new set with the
    version counter bumped instead of writing into an existing one.
    """

    def __init__(self, shapes: Mapping[str, Sequence[int]], flat: Optional[np.ndarray] = None,
                 dtype: str = "f64", version: int = 0):
        self._layout: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            self._layout[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64))
        self.dtype = dtype
        np_dtype = resolve_dtype(dtype)
        if flat is None:
            flat = np.zeros(offset, dtype=np_dtype)
        else:
            flat = np.array(flat, dtype=np_dtype).reshape(-1)
            if flat.size != offset:
                raise ShapeMismatchError(f"parameter buffer holds {flat.size} scalars, layout needs {offset}")
        flat.setflags(write=False)
        self.flat = flat
        self.version = version

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "f64", version: int = 0) -> "ParameterSet":
        shapes = {name: np.shape(arr) for name, arr in arrays.items()}
        flat = np.concatenate([np.asarray(arr).reshape(-1) for arr in arrays.values()]) if arrays else None
        return cls(shapes, flat=flat, dtype=dtype, version=version)

    @property
    def names(self) -> List[str]:
        return list(self._layout)

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: shape for name, (_, shape) in self._layout.items()}

    @property
    def size(self) -> int:
        return self.flat.size

    def __iter__(self):
        return iter(self._layout)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self._layout[name]
        return self.flat[offset:offset + int(np.prod(shape, dtype=np.int64))].reshape(shape)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: self[name].copy() for name in self._layout}

    def watch(self, tape: Tape, prefix: str = "") -> Dict[str, Tensor]:
        """Register every slice on `tape` (as `prefix + name`); returns name -> leaf."""
        return {name: tape.watch(prefix + name, self[name]) for name in self._layout}

    def flatten(self, slices: Mapping[str, np.ndarray]) -> np.ndarray:
        """Lay per-slice arrays (e.g. gradients) out like the buffer; absent slices are zero."""
        out = np.zeros_like(self.flat)
        for name, (offset, shape) in self._layout.items():
            if name in slices:
                arr = np.asarray(slices[name])
                if arr.shape != shape:
                    raise ShapeMismatchError(f"slice {name}: got {list(arr.shape)}, expected {list(shape)}")
                out[offset:offset + arr.size] = arr.reshape(-1)
        return out

    def with_flat(self, flat: np.ndarray, bump: bool = True) -> "ParameterSet":
        return ParameterSet(self.shapes, flat=flat, dtype=self.dtype,
                            version=self.version + (1 if bump else 0))

    def with_slices(self, slices: Mapping[str, np.ndarray]) -> "ParameterSet":
        """Copy with some slices replaced; the version is unchanged."""
        flat = self.flat.copy()
        for name, arr in slices.items():
            if name not in self._layout:
                raise ShapeMismatchError(f"unknown parameter slice {name!r}")
            offset, shape = self._layout[name]
            arr = np.asarray(arr)
            if arr.shape != shape:
                raise ShapeMismatchError(f"slice {name}: got {list(arr.shape)}, expected {list(shape)}")
            flat[offset:offset + arr.size] = arr.reshape(-1)
        return ParameterSet(self.shapes, flat=flat, dtype=self.dtype, version=self.version)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.shapes, dtype=self.dtype, version=self.version)


# -- serialization ---------------------------------------------------------

@dataclass
class TensorRecord:
    name: str
    data: np.ndarray
    meta: Dict = field(default_factory=dict)


def encode_tensor(array, name: str, meta: Optional[Dict] = None) -> bytes:
    """One record: u32 LE header length, JSON header, raw LE IEEE-754 scalars."""
    arr = np.asarray(array)
    code = dtype_code(arr.dtype)
    header = {"shape": list(arr.shape), "dtype": code, "name": name}
    if meta:
        header["meta"] = meta
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return struct.pack("<I", len(head)) + head + body


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[TensorRecord, int]:
    """Decode the record starting at `offset`; returns it and the next offset."""
    if offset + 4 > len(buf):
        raise CheckpointError(f"truncated tensor record at byte {offset}")
    (head_len,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4 + head_len
    try:
        header = json.loads(bytes(buf[offset + 4:start]).decode("utf-8"))
        dtype = DTYPES[header["dtype"]]
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"bad tensor header at byte {offset}: {e}") from e
    count = int(np.prod(shape, dtype=np.int64))
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise CheckpointError(f"tensor {header.get('name')!r} is truncated")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(shape).copy()
    return TensorRecord(header.get("name", ""), data, header.get("meta", {})), end


def decode_all(buf: bytes) -> List[TensorRecord]:
    records = []
    offset = 0
    while offset < len(buf):
        rec, offset = decode_tensor(buf, offset)
        records.append(rec)
    return records


def save_tensors(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named tensors to `path` (temporary file, then atomic rename)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    temp_file = path + ".tmp"
    with open(temp_file, "wb") as f:
        for name, arr in arrays.items():
            f.write(encode_tensor(arr, name))
    os.replace(temp_file, path)


def load_tensors(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"tensor file not found: {path}")
    with open(path, "rb") as f:
        buf = f.read()
    return {rec.name: rec.data for rec in decode_all(buf)}

