import pytest

from passorder.actions import (Catalog, Invocation, build_space, decode, legal_actions,
                               load_h_catalog, load_l_catalog)
from passorder.exceptions import ConfigError, IllegalAction
from passorder.state import ActionHistory, PendingSelection


@pytest.fixture(scope="module")
def spaces():
    return {lvl: build_space(lvl) for lvl in "HML"}


def test_h_space(spaces):
    h = spaces["H"]
    assert len(h) == 8
    assert decode(h, 0).passes == ("tti", "verify", "tbaa", "scoped-noalias", "simplifycfg",
                                   "sroa", "early-cse", "lower-expect")


def test_h_action_4(spaces):
    assert decode(spaces["H"], 4) == Invocation(
        ("reassociate", "loop-rotate", "licm", "loop-unswitch", "simplifycfg"))


def test_m_space(spaces):
    assert len(spaces["M"]) == 42
    m = spaces["M"]
    inv = decode(m, m.single_pass_id("instcombine"))
    assert inv == Invocation(("instcombine",))


def test_l_space_counts_catalog(spaces):
    values = sum(len(vals) for params in load_l_catalog().values() for _, vals in params)
    assert values == 145
    assert len(spaces["L"]) == 42 + values == 187


def test_l_mask_without_pending(spaces):
    mask = legal_actions(spaces["L"], ActionHistory())
    assert mask[:42].all() and not mask[42:].any()


def test_l_mask_pending_gvn(spaces):
    L = spaces["L"]
    h = ActionHistory((L.single_pass_id("gvn"),), 1, PendingSelection("gvn", (), ("enable-pre",)))
    legal = legal_actions(L, h).nonzero()[0]
    assert sorted(L[i].value for i in legal) == ["false", "true"]
    assert all(L[i].parameter == "enable-pre" for i in legal)


def test_budget_exhausted_mask(spaces):
    assert not legal_actions(spaces["H"], ActionHistory((0,) * 16, 16), 16).any()


def test_licm_chain(spaces):
    L = spaces["L"]
    pending = decode(L, L.single_pass_id("licm"))
    assert pending == PendingSelection("licm", (), ("disable-licm-promotion",))
    [vid] = [i for i in L.value_actions("licm", "disable-licm-promotion") if L[i].value == "false"]
    inv = decode(L, vid, pending)
    assert inv == Invocation(("licm",), (("licm", "disable-licm-promotion", "false"),))


def test_m_parameterized_pass_uses_defaults(spaces):
    m = spaces["M"]
    assert decode(m, m.single_pass_id("gvn")) == Invocation(("gvn",))


def test_illegal_decodes(spaces):
    L = spaces["L"]
    with pytest.raises(IllegalAction):
        decode(L, 999)
    with pytest.raises(IllegalAction):
        decode(L, L.value_actions("gvn", "enable-pre")[0])  # nothing pending
    pending = decode(L, L.single_pass_id("licm"))
    with pytest.raises(IllegalAction):
        decode(L, L.single_pass_id("gvn"), pending)


def test_multi_parameter_chain_binds_in_order(spaces):
    L = spaces["L"]
    params = L.parameter_catalog["loop-unroll"]
    state = decode(L, L.single_pass_id("loop-unroll"))
    for name, values in params:
        h = ActionHistory((0,), 1, state)
        legal = set(legal_actions(L, h).nonzero()[0])
        assert legal == set(L.value_actions("loop-unroll", name))
        state = decode(L, L.value_actions("loop-unroll", name)[-1], state)
    assert isinstance(state, Invocation) and len(state.flags) == len(params)


def test_h_slots_and_analysis_passes():
    groups, analysis = load_h_catalog()
    assert sum(len(g) for g in groups) == 74
    assert len(Catalog(groups, analysis).transformation_passes()) == 42
    assert analysis == {"tti", "verify", "tbaa", "scoped-noalias", "targetlibinfo",
                        "globals-aa", "barrier"}


def test_malformed_catalog_names_line(tmp_path):
    bad = tmp_path / "h.tsv"
    bad.write_text("0\tsroa\nx\tgvn\n")
    with pytest.raises(ConfigError, match=r"h.tsv:2"):
        load_h_catalog(bad)
    badl = tmp_path / "l.tsv"
    badl.write_text("gvn\tenable-pre\n")
    with pytest.raises(ConfigError, match=r"l.tsv:1"):
        load_l_catalog(badl)


def test_unknown_level():
    with pytest.raises(ConfigError):
        build_space("X")
