"""Hierarchical topic names and filters.

Levels are separated by '/'.  In a filter '+' stands for exactly one level
and '#' (last level only) for the remaining levels, including none: "a/#"
matches "a" and "a/b/c".  Wildcards in the first level never match topics
starting with '$', which keeps introspection topics out of "#" and "+/...".
"""

from __future__ import annotations

__all__ = [
    "TopicError",
    "validate_topic",
    "validate_filter",
    "topic_match",
    "TopicFilter",
]


class TopicError(ValueError):
    pass


def validate_topic(topic: str) -> str:
    """Concrete (publishable) topic: non-empty, no wildcards, no NUL."""
    if not isinstance(topic, str) or not topic:
        raise TopicError("topic must be a non-empty string")
    if "+" in topic or "#" in topic:
        raise TopicError(f"wildcards are not allowed in a publish topic: {topic!r}")
    if "\x00" in topic:
        raise TopicError("NUL in topic")
    return topic


def validate_filter(pattern: str) -> tuple:
    if not isinstance(pattern, str) or not pattern:
        raise TopicError("filter must be a non-empty string")
    if "\x00" in pattern:
        raise TopicError("NUL in filter")
    levels = tuple(pattern.split("/"))
    for i, lev in enumerate(levels):
        if "#" in lev and (lev != "#" or i != len(levels) - 1):
            raise TopicError(f"'#' must be a whole, final level: {pattern!r}")
        if "+" in lev and lev != "+":
            raise TopicError(f"'+' must occupy a whole level: {pattern!r}")
    return levels


def _match_levels(f: tuple, t: list) -> bool:
    if t and t[0].startswith("$") and f and f[0] in ("+", "#"):
        return False
    n = len(f)
    for i, lev in enumerate(f):
        if lev == "#":
            return True
        if i >= len(t):
            return False
        if lev != "+" and lev != t[i]:
            return False
    return n == len(t)


def topic_match(pattern: str, topic: str) -> bool:
    """True when ``topic`` is selected by filter ``pattern``."""
    return _match_levels(validate_filter(pattern), validate_topic(topic).split("/"))


class TopicFilter:
    """Pre-parsed filter for repeated matching."""

    __slots__ = ("pattern", "levels", "exact")

    def __init__(self, pattern: str):
        self.levels = validate_filter(pattern)
        self.pattern = pattern
        self.exact = "+" not in self.levels and "#" not in self.levels

    def matches(self, topic: str) -> bool:
        if self.exact:
            return topic == self.pattern
        return _match_levels(self.levels, topic.split("/"))

    def __repr__(self):
        return f"TopicFilter({self.pattern!r})"

    def __eq__(self, other):
        return isinstance(other, TopicFilter) and other.pattern == self.pattern

    def __hash__(self):
        return hash(self.pattern)
