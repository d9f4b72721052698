from __future__ import annotations

import hashlib
from dataclasses import dataclass

BUILD_ID_LEN = 20


@dataclass(frozen=True, order=True)
class BuildId:
    """Opaque 20-byte binary identifier, rendered as lowercase hex."""

    raw: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.raw, (bytes, bytearray)) or len(self.raw) != BUILD_ID_LEN:
            raise ValueError(f"build id must be exactly {BUILD_ID_LEN} bytes")
        object.__setattr__(self, "raw", bytes(self.raw))

    @property
    def hex(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_hex(cls, text: str) -> "BuildId":
        return cls(bytes.fromhex(text))

    @classmethod
    def digest_of(cls, payload: bytes) -> "BuildId":
        return cls(hashlib.sha256(payload).digest()[:BUILD_ID_LEN])

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"BuildId({self.hex[:12]}...)"
