import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partlens.kb import (
    HolMeMap,
    KBParseError,
    KBValidationError,
    PartEntry,
    ResolutionError,
    filter_hyper_meronyms,
    load_kb,
    load_kb_file,
    resolve_parts,
)


def doc(*concepts):
    return json.dumps({"concepts": list(concepts)})


def part(name, within=(), visible=True):
    return {"name": name, "visible": visible, "within": list(within)}


@pytest.fixture(scope="module")
def pascal():
    return load_kb_file("pascal")


@pytest.fixture(scope="module")
def imagenet():
    return load_kb_file("imagenet")


def test_bundled_pascal_bottle(pascal):
    assert resolve_parts("bottle", pascal) == ["body", "cap"]


def test_bundled_pascal_horse(pascal):
    assert resolve_parts("horse", pascal) == ["head", "torso", "leg", "tail"]


def test_bundled_pascal_seagull_climbs_to_bird(pascal):
    assert pascal.concepts["seagull"].parts == ()
    assert resolve_parts("seagull", pascal) == resolve_parts("bird", pascal)


def test_bundled_imagenet_loads(imagenet):
    assert len(imagenet) == 81
    for cid in imagenet.concepts:
        assert resolve_parts(cid, imagenet)


def test_empty_document():
    kb = load_kb('{"concepts": []}')
    assert len(kb) == 0 and kb == HolMeMap({})


def test_within_missing_part_rejected():
    with pytest.raises(KBValidationError, match="head"):
        load_kb(doc({"id": "cat", "hypernyms": [], "parts": [part("mouth", ["head"])]}))


def test_self_containment_rejected():
    with pytest.raises(KBValidationError, match="cycle"):
        load_kb(doc({"id": "cat", "parts": [part("head", ["head"])]}))


def test_containment_cycle_rejected():
    with pytest.raises(KBValidationError, match="cycle"):
        load_kb(doc({"id": "cat", "parts": [part("a", ["b"]), part("b", ["c"]), part("c", ["a"])]}))


def test_hypernym_cycle_rejected():
    with pytest.raises(KBValidationError, match="hypernym"):
        load_kb(doc({"id": "a", "hypernyms": ["b"]}, {"id": "b", "hypernyms": ["a"]}))


def test_self_hypernym_rejected():
    with pytest.raises(KBValidationError):
        load_kb(doc({"id": "a", "hypernyms": ["a"]}))


def test_duplicate_id_rejected():
    with pytest.raises(KBValidationError, match="duplicate"):
        load_kb(doc({"id": "a"}, {"id": "a"}))


def test_parse_error_reports_line():
    with pytest.raises(KBParseError) as err:
        load_kb('{\n "concepts": [\n  {"id": "a",,}\n ]\n}')
    assert err.value.line == 3


def test_parse_error_reports_field():
    with pytest.raises(KBParseError) as err:
        load_kb(doc({"id": "a", "parts": [{"name": "x", "visible": "yes"}]}))
    assert err.value.field == "concepts[0].parts[0].visible"


@pytest.mark.parametrize("bad", ["[]", '{"concepts": 3}', '{"concepts": [{"id": ""}]}', '{"concepts": [{"id": "a", "hypernyms": "b"}]}'])
def test_schema_violations(bad):
    with pytest.raises(KBParseError):
        load_kb(bad)


def test_cat_hyper_meronyms():
    parts = [
        PartEntry("head"),
        PartEntry("mouth", within=frozenset({"head"})),
        PartEntry("whiskers", within=frozenset({"head"})),
        PartEntry("legs"),
        PartEntry("feet"),
        PartEntry("tail"),
    ]
    assert filter_hyper_meronyms(parts) == ["head", "legs", "feet", "tail"]


def test_filter_identity_and_empty():
    parts = [PartEntry("a"), PartEntry("b"), PartEntry("c")]
    assert filter_hyper_meronyms(parts) == ["a", "b", "c"]
    assert filter_hyper_meronyms([]) == []


def test_filter_drops_invisible_first():
    # The container is invisible, so the contained part becomes top-level.
    parts = [PartEntry("inside", visible=False), PartEntry("eye", within=frozenset({"inside"})), PartEntry("ghost", visible=False)]
    assert filter_hyper_meronyms(parts) == ["eye"]


def test_resolve_unknown():
    with pytest.raises(ResolutionError, match="qwerty"):
        resolve_parts("qwerty", load_kb('{"concepts": []}'))


def test_resolve_no_ancestor_with_parts_names_chain():
    kb = load_kb(doc({"id": "x", "hypernyms": ["y", "z"]}, {"id": "y"}))
    with pytest.raises(ResolutionError) as err:
        resolve_parts("x", kb)
    assert err.value.chain == ["y", "z"]
    assert "x -> y -> z" in str(err.value)


def test_resolve_chain_order_is_authoritative():
    kb = load_kb(
        doc(
            {"id": "x", "hypernyms": ["empty", "first", "second"]},
            {"id": "empty"},
            {"id": "second", "parts": [part("s")]},
            {"id": "first", "parts": [part("f")]},
        )
    )
    assert resolve_parts("x", kb) == ["f"]


def test_round_trip_bundled(pascal, imagenet):
    for kb in (pascal, imagenet):
        assert load_kb(kb.dumps()) == kb


def test_kb_is_immutable(pascal):
    with pytest.raises(TypeError):
        pascal.concepts["new"] = None


names = st.sampled_from(list("abcdefgh"))


@st.composite
def part_lists(draw):
    chosen = draw(st.lists(names, unique=True, max_size=8))
    out = []
    for i, n in enumerate(chosen):
        # Only point at earlier parts, which keeps containment acyclic.
        within = draw(st.lists(st.sampled_from(chosen[:i]), unique=True, max_size=2)) if i else []
        out.append(part(n, within, draw(st.booleans())))
    return out


@settings(max_examples=200)
@given(parts=part_lists())
def test_filter_output_is_antichain_and_ordered(parts):
    kb = load_kb(doc({"id": "c", "parts": parts}))
    entries = kb.concepts["c"].parts
    out = filter_hyper_meronyms(entries)
    by_name = {p.name: p for p in entries}
    assert all(by_name[n].visible for n in out)
    assert not any(by_name[n].within & set(out) for n in out)
    order = [p.name for p in entries]
    assert out == sorted(out, key=order.index)


@settings(max_examples=100)
@given(parts=part_lists(), chain_len=st.integers(1, 4))
def test_resolve_inherits_from_first_ancestor(parts, chain_len):
    ancestors = [{"id": f"h{i}"} for i in range(chain_len - 1)] + [{"id": "top", "parts": parts}]
    kb = load_kb(doc({"id": "leaf", "hypernyms": [a["id"] for a in ancestors]}, *ancestors))
    if filter_hyper_meronyms(kb.concepts["top"].parts):
        assert resolve_parts("leaf", kb) == resolve_parts("top", kb)
        assert resolve_parts("leaf", kb) == resolve_parts("leaf", kb)
    else:
        with pytest.raises(ResolutionError):
            resolve_parts("leaf", kb)


@settings(max_examples=100)
@given(parts=part_lists())
def test_round_trip_property(parts):
    kb = load_kb(doc({"id": "c", "hypernyms": ["d"], "parts": parts}, {"id": "d"}))
    assert load_kb(kb.dumps()) == kb
