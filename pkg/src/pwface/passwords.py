"""N-bit passwords, their centered encoding and the inverse used for recovery.

A password is stored as a tuple of 0/1 ints. The network never sees the raw
bits: it sees ``bits - 0.5`` replicated over every pixel, so negating the
centered vector is the same as flipping every bit. That is what makes the
recovery key ``inverse(p)`` a member of the password space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

DEFAULT_BITS = 16
CHUNK_BITS = 4


class PasswordError(ValueError):
    pass


def check_bits(n_bits: int) -> int:
    if n_bits < 4 or n_bits % CHUNK_BITS != 0:
        raise PasswordError(f"password length must be a positive multiple of 4, got {n_bits}")
    return n_bits


@dataclass(frozen=True)
class Password:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise PasswordError("password bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @classmethod
    def from_int(cls, value: int, n_bits: int = DEFAULT_BITS) -> "Password":
        if not 0 <= value < 2**n_bits:
            raise PasswordError(f"{value} does not fit in {n_bits} bits")
        return cls(tuple((value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)))

    def to_int(self) -> int:
        out = 0
        for b in self.bits:
            out = (out << 1) | b
        return out

    @classmethod
    def from_hex(cls, text: str, n_bits: int | None = None) -> "Password":
        text = text.strip().lower()
        if not text or any(ch not in "0123456789abcdef" for ch in text):
            raise PasswordError(f"not a hex password: {text!r}")
        if n_bits is not None and len(text) * 4 != n_bits:
            raise PasswordError(f"expected {n_bits // 4} hex digits, got {len(text)}")
        return cls.from_int(int(text, 16), len(text) * 4)

    def to_hex(self) -> str:
        return format(self.to_int(), f"0{len(self.bits) // 4}x")

    @classmethod
    def from_string(cls, text: str) -> "Password":
        """Parse a plain bit string such as ``"1010 0101"`` (spaces ignored)."""
        return cls(tuple(int(ch) for ch in text.replace(" ", "")))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


def inverse(p: Password) -> Password:
    return Password(tuple(1 - b for b in p.bits))


def centered(p: Password) -> np.ndarray:
    return np.asarray(p.bits, dtype=np.float64) - 0.5


def to_plane(p: Password, height: int, width: int) -> np.ndarray:
    """H x W x N array whose channel c is constant and equal to centered(p)[c]."""
    if height <= 0 or width <= 0:
        raise PasswordError("plane size must be positive")
    return np.broadcast_to(centered(p), (height, width, p.n_bits)).copy()


def password_tensor(passwords: Sequence[Password], device=None, dtype=torch.float32) -> torch.Tensor:
    """Batch of centered passwords as a (B, N) tensor."""
    arr = np.stack([centered(p) for p in passwords])
    return torch.as_tensor(arr, dtype=dtype, device=device)


def plane_tensor(codes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, N) centered codes -> (B, N, H, W) constant planes, channels-first."""
    return codes[:, :, None, None].expand(-1, -1, height, width)


def chunks(p: Password) -> tuple[int, ...]:
    check_bits(p.n_bits)
    return tuple(
        int("".join(map(str, p.bits[i : i + CHUNK_BITS])), 2) for i in range(0, p.n_bits, CHUNK_BITS)
    )


def unchunks(values: Sequence[int]) -> Password:
    bits: list[int] = []
    for v in values:
        if not 0 <= int(v) < 2**CHUNK_BITS:
            raise PasswordError(f"chunk value {v} out of range")
        bits.extend((int(v) >> (CHUNK_BITS - 1 - k)) & 1 for k in range(CHUNK_BITS))
    return Password(tuple(bits))


def chunk_tensor(passwords: Sequence[Password], device=None) -> torch.Tensor:
    """(B, N/4) long tensor of chunk targets for the auxiliary classifier."""
    return torch.tensor([chunks(p) for p in passwords], dtype=torch.long, device=device)


def sample_password(rng: np.random.Generator, n_bits: int = DEFAULT_BITS) -> Password:
    return Password(tuple(int(b) for b in rng.integers(0, 2, size=n_bits)))


def sample_distinct_pair(rng: np.random.Generator, n_bits: int = DEFAULT_BITS) -> tuple[Password, Password]:
    first = sample_password(rng, n_bits)
    # uniform over the 2^N - 1 others: add a nonzero offset modulo 2^N
    offset = int(rng.integers(1, 2**n_bits))
    return first, Password.from_int((first.to_int() + offset) % 2**n_bits, n_bits)


def sample_wrong_recovery(
    rng: np.random.Generator, p: Password, exclude: Sequence[Password] = ()
) -> Password:
    """Uniform draw from the password space minus inverse(p) and ``exclude``."""
    n = p.n_bits
    if n < 2:
        raise PasswordError("need at least 2 bits")
    banned = {inverse(p).to_int()} | {q.to_int() for q in exclude}
    if len(banned) >= 2**n:
        raise PasswordError("no admissible wrong password left")
    while True:
        cand = int(rng.integers(0, 2**n))
        if cand not in banned:
            return Password.from_int(cand, n)


def all_passwords(n_bits: int) -> Iterator[Password]:
    """Every password in increasing integer order. Only sensible for small N."""
    for v in range(2**n_bits):
        yield Password.from_int(v, n_bits)


def parse_password_arg(text: str, n_bits: int, seed: int | None = None) -> Password:
    """CLI form: N/4 hex digits, or the literal ``random`` together with a seed."""
    if text == "random":
        if seed is None:
            raise PasswordError("--password random requires --seed")
        return sample_password(np.random.default_rng(seed), n_bits)
    return Password.from_hex(text, n_bits)
