"""Paired image/label volumes, the PNPV binary file format, and dataset
manifests.

PNPV layout (all little-endian):
  magic "PNPV" | version u32 | dims 3xu32 | spacing 3xf32 |
  image f32 row-major | label u8 row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PNPV"
VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class VolumeSample:
    image: np.ndarray    # float32, [0, 1]
    label: np.ndarray    # uint8 class indices
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.label = np.ascontiguousarray(self.label, dtype=np.uint8)
        if self.image.shape != self.label.shape:
            raise FormatError("image/label shape mismatch: %r vs %r"
                              % (self.image.shape, self.label.shape))
        self.spacing = tuple(float(s) for s in self.spacing)


def write_volume(sample: VolumeSample, path):
    dims = sample.image.shape
    header = MAGIC + struct.pack("<I", VERSION)
    header += struct.pack("<3I", *dims)
    header += struct.pack("<3f", *sample.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sample.image.astype("<f4").tobytes())
        fh.write(sample.label.tobytes())


def read_volume(path) -> VolumeSample:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError("bad magic %r at offset 0, expected %r" % (blob[:4], MAGIC))
    if len(blob) < 32:
        raise FormatError("truncated header: %d bytes at offset %d" % (len(blob), len(blob)))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError("unsupported version %d at offset 4" % version)
    dims = struct.unpack_from("<3I", blob, 8)
    spacing = struct.unpack_from("<3f", blob, 20)
    nvox = int(np.prod(dims))
    img_end = 32 + 4 * nvox
    lab_end = img_end + nvox
    if len(blob) != lab_end:
        raise FormatError("truncated payload: have %d bytes, expected %d (offset %d)"
                          % (len(blob), lab_end, min(len(blob), lab_end)))
    image = np.frombuffer(blob, dtype="<f4", count=nvox, offset=32).reshape(dims)
    label = np.frombuffer(blob, dtype=np.uint8, count=nvox, offset=img_end).reshape(dims)
    return VolumeSample(image=image.copy(), label=label.copy(), spacing=spacing)


# ---------------------------------------------------------------------------
# manifest

SPLITS = ("train", "val", "test")


def split_indices(n, ratios, seed):
    """Deterministic shuffled split of range(n) into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise FormatError("split ratios must sum to 1, got %r" % (ratios,))
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n_train == 0 or n_train + n_val >= n:
        pass  # tiny datasets may legitimately have empty val
    splits = {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }
    return splits


def write_manifest(path, rel_paths, ratios, seed):
    """Newline-delimited manifest with [train]/[val]/[test] section headers."""
    if not rel_paths:
        raise FormatError("cannot write a manifest for an empty dataset")
    splits = split_indices(len(rel_paths), ratios, seed)
    lines = ["# pnpv manifest v1 seed=%d ratios=%s"
             % (seed, "/".join("%g" % r for r in ratios))]
    for name in SPLITS:
        lines.append("[%s]" % name)
        lines.extend(rel_paths[i] for i in splits[name])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    splits = {name: [] for name in SPLITS}
    current = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in splits:
                    raise FormatError("unknown split section %r" % current)
                continue
            if current is None:
                raise FormatError("entry before any split section: %r" % line)
            splits[current].append(line)
    return splits
