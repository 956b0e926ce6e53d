"""Perturbation-block insertion at instruction boundaries.

`augment` interleaves fixed-size blocks of semantic-NOP bytes into a code
section (one block after every k-th instruction), and emits the augmented
bytes, their gray-scale image, and the binary perturbation mask marking
exactly the inserted pixels. `strip` removes the blocks again, recovering
the original section byte-for-byte.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from . import images, isa
from .errors import FormatError, InvalidArgumentError, UnfillableBlockError


@dataclass(frozen=True)
class MaskConfig:
    block_size: int = 8  # bytes per perturbation block
    frequency: int = 1  # one block every `frequency` instructions
    init_mode: str = "naive_nops"  # or "random_nops"
    width: int = images.DEFAULT_WIDTH
    seed: int = 0  # RNG seed for random_nops initialization

    def __post_init__(self):
        if self.block_size < 1:
            raise InvalidArgumentError("block_size must be >= 1")
        if self.frequency < 1:
            raise InvalidArgumentError("frequency must be >= 1")
        if self.init_mode not in ("naive_nops", "random_nops"):
            raise InvalidArgumentError(f"unknown init_mode {self.init_mode!r}")


@dataclass(frozen=True)
class AugmentedBinary:
    bytes: bytes
    block_spans: tuple  # (offset, length) pairs, ascending, non-overlapping
    origin_map: dict  # original instruction offset -> augmented offset

    @property
    def inserted_bytes(self):
        return sum(length for _, length in self.block_spans)


def augment(code: bytes, stream: isa.InstructionStream, cfg: MaskConfig,
            nop_candidates: list | None = None):
    """Insert one block after every cfg.frequency-th instruction.

    Returns (AugmentedBinary, GrayImage, PerturbationMask); the mask is a
    uint8 array of the image's shape with ones exactly on inserted pixels.
    """
    code = bytes(code)
    if stream.section_len != len(code):
        raise InvalidArgumentError("instruction stream does not tile the code")
    if cfg.init_mode == "random_nops" and nop_candidates is None:
        nop_candidates = isa.generate_nops(cfg.block_size)
        if not nop_candidates:
            raise UnfillableBlockError(
                f"no semantic NOP sequence of {cfg.block_size} bytes exists"
            )
    rng = random.Random(cfg.seed)

    out = bytearray()
    spans = []
    origin_map = {}
    for index, insn in enumerate(stream.instructions, start=1):
        origin_map[insn.offset] = len(out)
        out += code[insn.offset:insn.offset + insn.length]
        if index % cfg.frequency == 0:
            if cfg.init_mode == "naive_nops":
                block = b"\x90" * cfg.block_size
            else:
                block = rng.choice(nop_candidates).bytes
            spans.append((len(out), cfg.block_size))
            out += block

    aug = AugmentedBinary(bytes(out), tuple(spans), origin_map)
    img = images.bytes_to_image(aug.bytes, cfg.width)
    mask = np.zeros(img.pixels.shape, dtype=np.uint8)
    flat = mask.reshape(-1)
    for offset, length in spans:
        flat[offset:offset + length] = 1
    return aug, img, mask


def strip(aug: AugmentedBinary) -> bytes:
    """Remove the block spans, recovering the original code section."""
    out = bytearray()
    pos = 0
    for offset, length in aug.block_spans:
        out += aug.bytes[pos:offset]
        pos = offset + length
    out += aug.bytes[pos:]
    return bytes(out)


def replace_blocks(aug: AugmentedBinary, replacements: list) -> AugmentedBinary:
    """New AugmentedBinary with block contents swapped in place."""
    if len(replacements) != len(aug.block_spans):
        raise InvalidArgumentError("one replacement per block span required")
    out = bytearray(aug.bytes)
    for (offset, length), blob in zip(aug.block_spans, replacements):
        if len(blob) != length:
            raise InvalidArgumentError("replacement length must match the span")
        out[offset:offset + length] = blob
    return AugmentedBinary(bytes(out), aug.block_spans, aug.origin_map)


def expansion_rate(aug: AugmentedBinary) -> float:
    original_len = len(aug.bytes) - aug.inserted_bytes
    return aug.inserted_bytes / original_len


def save_spans(aug: AugmentedBinary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for offset, length in aug.block_spans:
            fh.write(f"{offset},{length}\n")


def load_spans(path) -> tuple:
    spans = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                offset_s, length_s = line.split(",")
                offset, length = int(offset_s), int(length_s)
            except ValueError as exc:
                raise FormatError(f"line {lineno}: malformed span {line!r}") from exc
            if spans and offset < spans[-1][0] + spans[-1][1]:
                raise FormatError(f"line {lineno}: overlapping span")
            spans.append((offset, length))
    return tuple(spans)
