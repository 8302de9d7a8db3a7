"""
Tolerant parsing of enum values written by hand in JSON configs.

Attack and transform names show up in many spellings ("C&W", "cw",
"carlini-wagner"); the mapper folds them onto the canonical enum value.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Generic, Optional, Type, TypeVar, Union

TEnum = TypeVar("TEnum", bound=Enum)


def _normalize_token(token: str) -> str:
    """Lowercase, strip accents and drop separators."""
    normalized = unicodedata.normalize("NFD", token.strip().lower())
    stripped = "".join(char for char in normalized if not unicodedata.combining(char))
    return re.sub(r"[\s_\-&/.]+", "", stripped)


@dataclass
class EnumAliasMapper(Generic[TEnum]):
    """Maps aliases and canonical spellings onto enum members."""

    enum_cls: Type[TEnum]
    aliases: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        # normalized token -> canonical enum value
        self._token_to_canonical: Dict[str, str] = {}
        for member in self.enum_cls:
            self._token_to_canonical.setdefault(_normalize_token(member.value), member.value)
            self._token_to_canonical.setdefault(_normalize_token(member.name), member.value)
        for alias, canonical in self.aliases.items():
            self._token_to_canonical[_normalize_token(alias)] = canonical

    def to_enum(self, value: Union[str, TEnum, None]) -> Optional[TEnum]:
        if value is None or value == "":
            return None
        if isinstance(value, self.enum_cls):
            return value
        canonical = self._token_to_canonical.get(_normalize_token(str(value)))
        if canonical is None:
            raise ValueError(f"Value '{value}' is not supported for {self.enum_cls.__name__}")
        return self.enum_cls(canonical)


__all__ = ["EnumAliasMapper"]
