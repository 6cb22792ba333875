import itertools

import pytest
from hypothesis import given, strategies as st

from digmon.transport.topics import TopicError, TopicFilter, topic_match, validate_filter, validate_topic


def reference_match(pattern, topic):
    """Recursive reading of the wildcard rules, written independently."""
    f, t = pattern.split("/"), topic.split("/")
    if t[0].startswith("$") and f[0] in ("+", "#"):
        return False

    def rec(i, j):
        if i == len(f):
            return j == len(t)
        if f[i] == "#":
            return True
        if j == len(t):
            return False
        return (f[i] == "+" or f[i] == t[j]) and rec(i + 1, j + 1)

    return rec(0, 0)


def _filters(depth):
    for n in range(1, depth + 1):
        for levels in itertools.product("ab+#", repeat=n):
            if "#" in levels[:-1]:
                continue
            yield "/".join(levels)


def _topics(depth):
    for n in range(1, depth + 1):
        for levels in itertools.product(["a", "b", "$a"], repeat=n):
            if any(lv.startswith("$") for lv in levels[1:]):
                continue
            yield "/".join(levels)


def test_exhaustive_against_reference():
    fs, ts = list(_filters(4)), list(_topics(4))
    assert len(fs) == 4 + 12 + 36 + 108 and len(ts) == 3 + 6 + 12 + 24
    for f in fs:
        tf = TopicFilter(f)
        for t in ts:
            assert tf.matches(t) == reference_match(f, t) == topic_match(f, t), (f, t)


@pytest.mark.parametrize("f,t,want", [
    ("a/#", "a", True),
    ("a/#", "a/b/c", True),
    ("a/+", "a", False),
    ("a/+", "a/b", True),
    ("a/+", "a/b/c", False),
    ("+/+/+/pwr/#", "davide/rack0/node01/pwr/avg1ms", True),
    ("+/+/+/pwr/#", "davide/rack0/node01/occ/x", False),
    ("#", "$sys/broker/drops/x", False),
    ("$sys/#", "$sys/broker/drops/x", True),
    ("+/broker", "$sys/broker", False),
    ("a/b", "a/b", True),
    ("a/b", "a/bb", False),
])
def test_examples(f, t, want):
    assert topic_match(f, t) is want


@pytest.mark.parametrize("bad", ["a/#/b", "a#", "a/b+", "", "#/a", "a/\x00"])
def test_bad_filters(bad):
    with pytest.raises(TopicError):
        validate_filter(bad)


@pytest.mark.parametrize("bad", ["a/+", "a/#", "", "x\x00"])
def test_bad_topics(bad):
    with pytest.raises(TopicError):
        validate_topic(bad)


level = st.sampled_from(["a", "b", "cc", "", "node01"])


@given(st.lists(level, min_size=1, max_size=6))
def test_topic_matches_itself_and_hash(levels):
    t = "/".join(levels)
    if not t:
        return
    assert topic_match(t, t)
    assert topic_match("#", t)
    assert topic_match(levels[0] + "/#", t)
    assert topic_match("/".join("+" for _ in levels), t)


def test_filter_equality_and_hash():
    assert TopicFilter("a/+") == TopicFilter("a/+")
    assert len({TopicFilter("a/+"), TopicFilter("a/+"), TopicFilter("a/#")}) == 2
