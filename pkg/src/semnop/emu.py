"""Miniature 32-bit CPU emulator for semantic-NOP verification.

Executes the decoder subset over registers, arithmetic flags, and a fixed
stack window around the initial stack pointer. Its single job is
`check_neutral`: run a candidate sequence from many randomized initial
states and confirm that registers, flags, the stack pointer, and live
stack memory (at or above the initial sp) come back unchanged.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from . import isa
from .errors import DecodeError, VerificationFailureError

REG_NAMES = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
SP = 4  # register index of esp
FLAG_NAMES = ("CF", "PF", "AF", "ZF", "SF", "OF")

STACK_HALF = 256  # bytes modeled below and above the initial sp
_MASK = 0xFFFFFFFF
_SIGN = 0x80000000

# EFLAGS bit positions used by pushf/popf (bit 1 is the always-set reserved bit)
_FLAG_BITS = {"CF": 0, "PF": 2, "AF": 4, "ZF": 6, "SF": 7, "OF": 11}


@dataclass
class CpuState:
    regs: list  # 8 x uint32, REG_NAMES order
    flags: dict  # FLAG_NAMES -> bool
    ip: int
    stack: bytearray  # window [stack_base, stack_base + 2*STACK_HALF)
    stack_base: int

    @property
    def sp(self):
        return self.regs[SP]

    def copy(self):
        return CpuState(list(self.regs), dict(self.flags), self.ip,
                        bytearray(self.stack), self.stack_base)

    def same_registers(self, other):
        return self.regs == other.regs

    def __repr__(self):
        regs = ", ".join(f"{n}={v:#010x}" for n, v in zip(REG_NAMES, self.regs))
        flags = "".join(n if self.flags[n] else n.lower() for n in FLAG_NAMES)
        return f"CpuState({regs}, flags={flags}, ip={self.ip})"


def initial_state(rng: random.Random | None = None, stack_base: int = 0x8000) -> CpuState:
    """A fresh state; randomized registers, flags, and stack if rng given."""
    regs = [0] * 8
    flags = {n: False for n in FLAG_NAMES}
    stack = bytearray(2 * STACK_HALF)
    if rng is not None:
        regs = [rng.getrandbits(32) for _ in range(8)]
        flags = {n: bool(rng.getrandbits(1)) for n in FLAG_NAMES}
        stack = bytearray(rng.getrandbits(8) for _ in range(2 * STACK_HALF))
    regs[SP] = stack_base + STACK_HALF
    return CpuState(regs, flags, 0, stack, stack_base)


def _read32(state, addr):
    lo = addr - state.stack_base
    if lo < 0 or lo + 4 > len(state.stack):
        raise VerificationFailureError(f"stack read outside window at {addr:#x}")
    return int.from_bytes(state.stack[lo:lo + 4], "little")


def _write32(state, addr, value):
    lo = addr - state.stack_base
    if lo < 0 or lo + 4 > len(state.stack):
        raise VerificationFailureError(f"stack write outside window at {addr:#x}")
    state.stack[lo:lo + 4] = (value & _MASK).to_bytes(4, "little")


def _push(state, value):
    state.regs[SP] = (state.regs[SP] - 4) & _MASK
    _write32(state, state.regs[SP], value)


def _pop(state):
    value = _read32(state, state.regs[SP])
    state.regs[SP] = (state.regs[SP] + 4) & _MASK
    return value


def _parity(value):
    return bin(value & 0xFF).count("1") % 2 == 0


def _set_szp(flags, result):
    flags["ZF"] = result == 0
    flags["SF"] = bool(result & _SIGN)
    flags["PF"] = _parity(result)


def _flags_value(flags):
    value = 1 << 1
    for name, bit in _FLAG_BITS.items():
        if flags[name]:
            value |= 1 << bit
    return value


def _flags_from_value(value):
    return {name: bool(value >> bit & 1) for name, bit in _FLAG_BITS.items()}


def _alu(op, a, imm, flags):
    """0x83-group ALU semantics; returns the result to write (None for cmp)."""
    if op in ("add", "adc"):
        carry_in = flags["CF"] if op == "adc" else False
        total = a + (imm & _MASK) + carry_in
        r = total & _MASK
        flags["CF"] = total > _MASK
        flags["OF"] = bool(~(a ^ imm) & (a ^ r) & _SIGN)
        flags["AF"] = bool((a ^ imm ^ r) & 0x10)
    elif op in ("sub", "sbb", "cmp"):
        borrow = flags["CF"] if op == "sbb" else False
        total = a - (imm & _MASK) - borrow
        r = total & _MASK
        flags["CF"] = total < 0
        flags["OF"] = bool((a ^ imm) & (a ^ r) & _SIGN)
        flags["AF"] = bool((a ^ imm ^ r) & 0x10)
    else:  # and/or/xor: CF=OF=0; AF left 0 for determinism
        if op == "and":
            r = a & imm & _MASK
        elif op == "or":
            r = (a | imm) & _MASK
        else:
            r = (a ^ imm) & _MASK
        flags["CF"] = flags["OF"] = flags["AF"] = False
    _set_szp(flags, r)
    return None if op == "cmp" else r


def _jcc_taken(cc, flags):
    cf, zf, sf, of, pf = (flags[n] for n in ("CF", "ZF", "SF", "OF", "PF"))
    base = (of, cf, zf, cf or zf, sf, pf, sf != of, zf or sf != of)[cc >> 1]
    return base != bool(cc & 1)


def _exec(state, code, insn):
    """Execute one decoded instruction in place; ip already at insn.offset."""
    op = insn.opcode_class
    off = insn.offset
    state.ip = off + insn.length
    if op == "nop":
        return
    if op == "mov_rr":
        modrm = code[off + 1]
        state.regs[modrm & 7] = state.regs[(modrm >> 3) & 7]
    elif op == "jcc":
        if _jcc_taken(code[off] & 0xF, state.flags):
            rel = code[off + 1]
            state.ip += rel - 256 if rel >= 128 else rel
    elif op == "push":
        _push(state, state.regs[code[off] - 0x50])
    elif op == "pop":
        state.regs[code[off] - 0x58] = _pop(state)
    elif op == "pushf":
        _push(state, _flags_value(state.flags))
    elif op == "popf":
        state.flags = _flags_from_value(_pop(state))
    elif op == "not":
        rm = code[off + 1] & 7
        state.regs[rm] = ~state.regs[rm] & _MASK
    elif op == "neg":
        rm = code[off + 1] & 7
        a = state.regs[rm]
        r = (-a) & _MASK
        state.flags["CF"] = a != 0
        state.flags["OF"] = a == _SIGN
        state.flags["AF"] = bool(a & 0xF)
        _set_szp(state.flags, r)
        state.regs[rm] = r
    elif op in isa.ALU_OPS:
        modrm = code[off + 1]
        imm = code[off + 2]
        imm = imm - 256 if imm >= 128 else imm  # sign-extended imm8
        r = _alu(op, state.regs[modrm & 7], imm & _MASK, state.flags)
        if r is not None:
            state.regs[modrm & 7] = r
    elif op == "inc" or op == "dec":
        rm = code[off + 1] & 7
        a = state.regs[rm]
        if op == "inc":
            r = (a + 1) & _MASK
            state.flags["OF"] = a == _SIGN - 1
            state.flags["AF"] = (a & 0xF) == 0xF
        else:
            r = (a - 1) & _MASK
            state.flags["OF"] = a == _SIGN
            state.flags["AF"] = (a & 0xF) == 0
        _set_szp(state.flags, r)  # CF unaffected by inc/dec
        state.regs[rm] = r
    elif op == "mov_imm32":
        state.regs[code[off] - 0xB8] = int.from_bytes(code[off + 1:off + 5], "little")
    elif op == "ret":
        state.ip = _pop(state)
    else:
        raise DecodeError(f"unexecutable opcode class {op}", off)


def step(state: CpuState, code: bytes) -> CpuState:
    """Execute the single instruction at state.ip; returns the new state."""
    insn = isa.decode_one(bytes(code), state.ip)
    out = state.copy()
    _exec(out, bytes(code), insn)
    return out


def run(state: CpuState, code: bytes, max_steps: int | None = None) -> CpuState:
    """Run until ip reaches exactly len(code); mutates and returns state."""
    code = bytes(code)
    if max_steps is None:
        max_steps = 64 + 16 * len(code)
    insn_cache = {}
    for _ in range(max_steps):
        if state.ip == len(code):
            return state
        if not 0 <= state.ip < len(code):
            raise VerificationFailureError(f"ip {state.ip} escaped the sequence")
        insn = insn_cache.get(state.ip)
        if insn is None:
            insn = insn_cache[state.ip] = isa.decode_one(code, state.ip)
        _exec(state, code, insn)
    raise VerificationFailureError("step budget exhausted (runaway execution)")


def check_neutral(seq: bytes, trials: int = 1000, seed: int = 0):
    """Is `seq` a semantic NOP under `trials` randomized initial states?

    Returns (True, None) or (False, violating_initial_state). Any abnormal
    execution (escape from the sequence, stack window overflow, runaway
    loop, runtime jump into an undecodable offset) counts as a violation.
    A sequence that does not decode at all raises DecodeError.
    """
    seq = bytes(seq)
    isa.decode(seq)  # static decodability; propagate failures
    rng = random.Random(seed)
    for _ in range(trials):
        init = initial_state(rng)
        state = init.copy()
        try:
            run(state, seq)
        except (VerificationFailureError, DecodeError):
            return False, init
        if (state.regs != init.regs
                or state.flags != init.flags
                or state.stack[STACK_HALF:] != init.stack[STACK_HALF:]):
            return False, init
    return True, None
