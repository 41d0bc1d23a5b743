import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdnns_piezo import config as cf
from tdnns_piezo import material as mat
from tdnns_piezo.cli import default_config


@pytest.mark.parametrize("study", cf.STUDIES)
def test_default_configs_round_trip(study):
    cfg = default_config(study)
    text = cf.dumps(cfg)
    again = cf.loads(text)
    assert again == cfg
    assert cf.dumps(again) == text


@given(
    study=st.sampled_from(cf.STUDIES),
    form_orders=st.sampled_from([("v1", 1, 1), ("v1", 1, 2), ("v1", 2, None), ("v2", 1, None),
                                 ("v2", 2, 1), ("v2_divfree", 1, 0), ("v2_divfree", 2, None),
                                 ("primal", 3, None), ("primal", 2, 4)]),
    levels=st.integers(1, 9),
    condense=st.booleans(),
    nx=st.integers(1, 500),
    phi=st.dictionaries(st.integers(1, 6), st.floats(-1e3, 1e3, allow_nan=False), max_size=3),
    t_nt=st.dictionaries(st.integers(1, 6), st.floats(-1e7, 1e7, allow_nan=False), max_size=2),
    band=st.one_of(st.none(), st.tuples(st.floats(0, 0.4), st.floats(0.6, 1.0)).map(list)),
    fraction=st.floats(0.01, 1.0),
)
def test_parse_serialize_parse_is_identity(study, form_orders, levels, condense, nx, phi, t_nt,
                                           band, fraction):
    f, k, kp = form_orders
    cfg = cf.StudyConfig(study=study, formulation=f, k=k, k_phi=kp, levels=levels, condense=condense)
    cfg.mesh.nx = nx
    cfg.mesh.band = band
    cfg.loads.phi0 = phi
    cfg.loads.t_nt = t_nt
    cfg.adaptive.fraction = fraction
    cfg.materials = {1: "sonox_p502", 2: "cards/pzt.toml"}
    cfg.validate()
    first = cf.loads(cf.dumps(cfg))
    assert first == cfg
    assert cf.loads(cf.dumps(first)) == first


def test_file_round_trip_and_relative_cards(tmp_path):
    card = tmp_path / "cards" / "p.toml"
    card.parent.mkdir()
    card.write_text(mat.format_card_e(mat.pzt5()))
    cfg = default_config("bimorph_uniform")
    cfg.materials = {1: "cards/p.toml", 2: "pzt5"}
    path = tmp_path / "study.toml"
    cf.save(cfg, path)
    back = cf.load(path)
    assert back == cfg
    m = back.material(1)
    assert abs(m.d[2, 2] - mat.pzt5().d[2, 2]) <= 1e-12 * abs(mat.pzt5().d[2, 2])
    assert set(back.materials2d()) == {1, 2}


def test_keys_are_strings_in_the_file():
    cfg = default_config("bimorph_uniform")
    text = cf.dumps(cfg)
    assert '[loads.phi0]' in text and '2 = 75.0' in text
    assert "k_phi" not in text  # None values are omitted


BAD = [
    ('study = "modal"', "unknown study"),
    ('formulation = "tdnns"', "unknown formulation"),
    ('k = 4', "unsupported"),
    ('formulation = "v2"\nk = 2\nk_phi = 2', "discontinuous potential"),
    ('formulation = "v2_divfree"\nk_phi = 1', "piecewise constant"),
    ('formulation = "v1"\nk_phi = 5', "continuous potential"),
    ('formulation = "primal"\nk = 7', "primal orders"),
    ('levels = 0', "at least one"),
    ('levels = 1.5', "integer"),
    ('condense = 1', "true or false"),
    ('colour = "red"', "unknown top-level"),
    ('[mesh]\nnx = 0', "positive"),
    ('[mesh]\nband = [0.7, 0.2]', "band"),
    ('[mesh]\nplies = "thin"', "list of numbers"),
    ('[mesh]\ndepth = 1.0', "unknown keys"),
    ('[loads.phi0]\ntop = 1.0', "not an integer"),
    ('[loads.phi0]\n2 = "high"', "expected a number"),
    ('[adaptive]\nfraction = 0.0', "fractions"),
    ('[output]\nsubdivision = 0', "subdivision"),
    ('[materials]', "no materials"),
    ('plane = "axisymmetric"', "plane"),
    ('mesh = 3', "must be a table"),
    ('levels = ', "invalid TOML"),
]


@pytest.mark.parametrize("text, message", BAD)
def test_rejections(text, message):
    with pytest.raises(cf.ConfigError, match=message):
        cf.loads(text)


def test_missing_inputs(tmp_path):
    with pytest.raises(cf.ConfigError, match="cannot read"):
        cf.load(tmp_path / "absent.toml")
    cfg = cf.StudyConfig(materials={1: "nowhere.toml"}, base_dir=str(tmp_path))
    with pytest.raises(cf.ConfigError, match="cannot read material card"):
        cfg.material(1)
    with pytest.raises(cf.ConfigError, match="no material for region 7"):
        cfg.material(7)
    bad = tmp_path / "bad.toml"
    bad.write_text("[card]\nform = \"x\"\n")
    with pytest.raises(cf.ConfigError):
        cf.StudyConfig(materials={1: str(bad)}).material(1)
