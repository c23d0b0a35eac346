"""Named-tensor weight container and its MPW1 binary format.

Layout (all integers little-endian)::

    b"MPW1"                       magic, the trailing digit is the format version
    u32                           entry count
    per entry:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 extents
        raw float32 values, row-major

Entries are written in insertion order, so save(load(x)) is byte-identical.
"""

import logging
import struct
from collections.abc import Iterable, Iterator
from pathlib import Path

import numpy as np

from mobile_portrait.tensor import Tensor
from mobile_portrait.validation import ContractError, InputFormatError, MissingWeightError, check_finite

logger = logging.getLogger(__name__)

MAGIC = b"MPW"
FORMAT_VERSION = 1


class ModelWeights:
    """Ordered mapping from tensor name to Tensor."""

    def __init__(self, entries: dict[str, Tensor] | None = None, format_version: int = FORMAT_VERSION):
        self.entries: dict[str, Tensor] = dict(entries or {})
        self.format_version = format_version

    # ============ Mapping Access ============

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.entries[name]
        except KeyError:
            raise MissingWeightError([name], component=name.split(".")[0]) from None

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def add(self, name: str, values: np.ndarray | Tensor, requires_grad: bool = False) -> Tensor:
        """Insert a tensor; names must be unique."""
        if name in self.entries:
            raise ContractError(f"duplicate weight name '{name}'")
        tensor = values if isinstance(values, Tensor) else Tensor(values, requires_grad=requires_grad, name=name)
        tensor.name = name
        self.entries[name] = tensor
        return tensor

    def assign(self, name: str, values: np.ndarray) -> None:
        """Overwrite the values of an existing tensor in place."""
        self[name].data = np.ascontiguousarray(values, dtype=np.float32).reshape(self[name].shape)

    def require(self, names: Iterable[str], component: str) -> None:
        """Raise MissingWeightError listing every absent name."""
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise MissingWeightError(missing, component=component)

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self.entries if n.startswith(prefix + ".")]

    def subset(self, prefixes: Iterable[str]) -> "ModelWeights":
        """A view holding the same Tensor objects for the given name prefixes."""
        prefixes = tuple(p + "." for p in prefixes)
        return ModelWeights({n: t for n, t in self.entries.items() if n.startswith(prefixes)})

    def merged(self, other: "ModelWeights") -> "ModelWeights":
        entries = dict(self.entries)
        for name, tensor in other.entries.items():
            if name in entries:
                raise ContractError(f"duplicate weight name '{name}' while merging")
            entries[name] = tensor
        return ModelWeights(entries, self.format_version)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.entries.items()},
            self.format_version,
        )

    def parameter_count(self, prefixes: Iterable[str] | None = None) -> int:
        selected = self if prefixes is None else self.subset(prefixes)
        return sum(t.size for t in selected.entries.values())

    def component_counts(self) -> dict[str, int]:
        """Parameter count per top-level name segment, in first-seen order."""
        counts: dict[str, int] = {}
        for name, tensor in self.entries.items():
            component = name.split(".")[0]
            counts[component] = counts.get(component, 0) + tensor.size
        return counts

    def set_trainable(self, prefixes: Iterable[str]) -> list[Tensor]:
        """Mark tensors under ``prefixes`` as requiring gradients and return them."""
        prefixes = tuple(p + "." for p in prefixes)
        params = []
        for name, tensor in self.entries.items():
            tensor.requires_grad = name.startswith(prefixes)
            if tensor.requires_grad:
                params.append(tensor)
        return params

    # ============ Serialization ============

    def to_bytes(self) -> bytes:
        """Serialize to the MPW1 layout."""
        out = bytearray(MAGIC + str(self.format_version).encode("ascii"))
        out += struct.pack("<I", len(self.entries))
        for name, tensor in self.entries.items():
            check_finite(tensor.data, f"weight '{name}'")
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded)) + encoded
            out += struct.pack("<B", tensor.ndim)
            out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
            out += tensor.data.astype("<f4", copy=False).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelWeights":
        """Parse the MPW1 layout.

        Raises:
            InputFormatError: On wrong magic, unsupported version, truncation or
                a zero extent.
            NumericalError: If a tensor holds NaN or Inf.
        """
        if len(blob) < 8 or blob[:3] != MAGIC:
            raise InputFormatError(
                "not a weight container (bad magic)",
                suggestions=["Weight files start with the bytes 'MPW1'"],
            )
        version = blob[3:4]
        if version != str(FORMAT_VERSION).encode("ascii"):
            raise InputFormatError(f"unsupported weight format version {version!r}")
        (count,) = struct.unpack_from("<I", blob, 4)
        offset = 8
        entries: dict[str, Tensor] = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                shape = struct.unpack_from(f"<{rank}I", blob, offset)
                offset += 4 * rank
                if 0 in shape:
                    raise InputFormatError(f"tensor '{name}' has a zero extent in shape {shape}")
                n = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
                offset += 4 * n
                if name in entries:
                    raise InputFormatError(f"duplicate tensor name '{name}'")
                check_finite(data, f"weight '{name}'")
                entries[name] = Tensor(data.astype(np.float32).reshape(shape), name=name)
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise InputFormatError(f"truncated or corrupt weight container: {e}") from e
        if offset != len(blob):
            raise InputFormatError(f"{len(blob) - offset} trailing bytes after the last tensor")
        return cls(entries, FORMAT_VERSION)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info("Wrote %d tensors (%d parameters) to %s", len(self), self.parameter_count(), path)
        return path

    @classmethod
    def load(cls, path: Path | str) -> "ModelWeights":
        path = Path(path)
        if not path.exists():
            raise InputFormatError(f"weight file '{path}' does not exist")
        weights = cls.from_bytes(path.read_bytes())
        logger.debug("Loaded %d tensors from %s", len(weights), path)
        return weights
