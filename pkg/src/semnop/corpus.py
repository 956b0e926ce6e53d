"""Dataset management: manifests, splits, PNG ingestion, and a synthetic
two-class corpus of decoder-subset binaries.

The synthetic generator stands in for image-only public corpora, which
ship no executables. Both classes emit mostly mov-immediate instructions;
they differ in the byte-value range of the immediates (and a sprinkle of
class-specific opcodes), giving the two classes distinct image textures a
small CNN separates easily.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import images, isa
from .errors import ConfigError, FormatError, UnsupportedFormatError

LABELS = ("benign", "malware")
KINDS = ("image", "binary")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str  # "benign" | "malware"
    kind: str  # "image" | "binary"
    sidecar: str | None = None  # instruction-boundary sidecar for binaries

    def __post_init__(self):
        if self.label not in LABELS:
            raise FormatError(f"unknown label {self.label!r}")
        if self.kind not in KINDS:
            raise FormatError(f"unknown kind {self.kind!r}")


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fields = [rec.path, rec.label, rec.kind]
            if rec.sidecar:
                fields.append(rec.sidecar)
            fh.write("\t".join(fields) + "\n")


def load_manifest(path, check_paths: bool = True) -> list:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise FormatError(f"line {lineno}: expected 3 or 4 fields")
            rec = ManifestRecord(parts[0], parts[1], parts[2],
                                 parts[3] if len(parts) == 4 else None)
            if rec.path in seen:
                raise FormatError(f"line {lineno}: duplicate path {rec.path}")
            seen.add(rec.path)
            if check_paths and not os.path.exists(rec.path):
                raise ConfigError(f"line {lineno}: missing file {rec.path}")
            records.append(rec)
    return records


# --------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class ClassProfile:
    imm_range: tuple  # inclusive byte-value range for immediates
    op_weights: dict  # opcode template -> relative weight


@dataclass(frozen=True)
class SynthSpec:
    min_instructions: int = 400
    max_instructions: int = 800
    benign: ClassProfile = field(default_factory=lambda: ClassProfile(
        imm_range=(150, 255),
        op_weights={"mov_imm32": 7, "mov_rr": 1, "nop": 1, "push": 1, "pop": 1},
    ))
    malware: ClassProfile = field(default_factory=lambda: ClassProfile(
        imm_range=(0, 105),
        op_weights={"mov_imm32": 7, "alu": 2, "push": 1, "pop": 1},
    ))
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_instructions <= self.max_instructions:
            raise ConfigError("bad instruction-count range")
        if self.benign == self.malware:
            raise ConfigError("class profiles must differ or the task is unlearnable")


_ALU_OPCODES = (0, 1, 4, 5, 6)  # add, or, and, sub, xor


def _emit_instruction(rng, template, profile):
    lo, hi = profile.imm_range
    reg = rng.randrange(8)
    if template == "mov_imm32":
        return bytes([0xB8 + reg] + [rng.randint(lo, hi) for _ in range(4)])
    if template == "mov_rr":
        return bytes([0x89, 0xC0 | (rng.randrange(8) << 3) | reg])
    if template == "nop":
        return b"\x90"
    if template == "push":
        return bytes([0x50 + reg])
    if template == "pop":
        return bytes([0x58 + reg])
    if template == "alu":
        op = rng.choice(_ALU_OPCODES)
        return bytes([0x83, 0xC0 | (op << 3) | reg, rng.randint(lo, hi) & 0xFF])
    raise ConfigError(f"unknown instruction template {template!r}")


def synth_sample(rng: random.Random, profile: ClassProfile,
                 n_instructions: int) -> bytes:
    templates = list(profile.op_weights)
    weights = list(profile.op_weights.values())
    out = bytearray()
    for _ in range(n_instructions):
        out += _emit_instruction(rng, rng.choices(templates, weights)[0], profile)
    return bytes(out)


def generate_corpus(spec: SynthSpec, n_per_class: int, out_dir) -> list:
    """Emit n binaries per class plus boundary sidecars and a manifest.

    Deterministic under spec.seed; returns the manifest records. The
    manifest itself is written to <out_dir>/manifest.tsv.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(spec.seed)
    records = []
    for label, profile in (("benign", spec.benign), ("malware", spec.malware)):
        for i in range(n_per_class):
            n = rng.randint(spec.min_instructions, spec.max_instructions)
            code = synth_sample(rng, profile, n)
            stream = isa.decode(code)  # by construction; asserts the subset
            bin_path = out_dir / f"{label}_{i:04d}.bin"
            sidecar = out_dir / f"{label}_{i:04d}.bounds"
            bin_path.write_bytes(code)
            isa.save_boundaries(stream, sidecar)
            records.append(ManifestRecord(str(bin_path), label, "binary",
                                          str(sidecar)))
    save_manifest(records, out_dir / "manifest.tsv")
    return records


def split(records, ratio: float, seed: int = 0):
    """Stratified, disjoint train/validation split, deterministic under seed."""
    if not 0 < ratio < 1:
        raise ConfigError("ratio must be in (0, 1)")
    rng = random.Random(seed)
    train, val = [], []
    for label in LABELS:
        group = [r for r in records if r.label == label]
        if len(group) < 2:
            raise ConfigError(f"class {label!r} has fewer than 2 samples")
        rng.shuffle(group)
        k = round(len(group) * ratio)
        k = min(max(k, 1), len(group) - 1)
        train += group[:k]
        val += group[k:]
    return train, val


def ingest_images(directory, label: str):
    """Manifest records for every readable 8-bit gray PNG in a directory.

    Returns (records, skipped) where skipped lists (path, reason) for
    unreadable files.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG files in {directory}")
    records, skipped = [], []
    for path in paths:
        try:
            images.read_png(path)
        except (UnsupportedFormatError, OSError, ValueError) as exc:
            skipped.append((str(path), str(exc)))
            continue
        records.append(ManifestRecord(str(path), label, "image"))
    return records, skipped


def load_labeled(records, width: int = images.DEFAULT_WIDTH, dtype=None):
    """Materialize manifest records as (NormalizedImage, label_index) pairs."""
    import numpy as np

    dtype = dtype or np.float32
    pairs = []
    for rec in records:
        if rec.kind == "image":
            img = images.read_png(rec.path)
        else:
            img = images.bytes_to_image(Path(rec.path).read_bytes(), width)
        pairs.append((images.normalize(img, dtype), LABELS.index(rec.label)))
    return pairs
