import json

import pytest

from mloweight import config as C

BASE = """\
out_dir = "runs/x"

[mlo]
steps = 5
gamma = 2.0

[level3]
lr = 1.0
"""

SUITE = """\
seeds = [0, 1]
modes = ["trilevel", "fixed-lambda"]

[mlo]
steps = 3

[task]
proj_dim = 2

[[tasks]]
name = "a"
aligned = 0

[[tasks]]
name = "b"
aligned = 1
"""


def test_defaults_fill_missing_tables():
    cfg, eff = C.loads(BASE)
    assert cfg.mlo.steps == 5 and cfg.mlo.gamma == 2.0 and cfg.mlo.level3.lr == 1.0
    assert eff["engine"]["mode"] == "trilevel" and eff["problem"]["kind"] == "synthetic"


def test_unknown_key_reports_name_and_line():
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE + "stepz = 3\n")
    assert info.value.key == "level3.stepz" and info.value.line == 9
    assert "level3.stepz (line 9)" in str(info.value)


def test_unknown_table_reports_line():
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE + "\n[optimiser]\nlr = 1\n")
    assert info.value.key == "optimiser" and info.value.line == 10


def test_unknown_root_key():
    with pytest.raises(C.ConfigError) as info:
        C.loads('outdir = "x"\n' + BASE)
    assert info.value.key == "outdir" and info.value.line == 1


def test_type_errors_carry_line():
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE.replace("steps = 5", 'steps = "five"'))
    assert info.value.key == "mlo.steps" and info.value.line == 4


def test_semantic_error_is_located():
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE.replace("gamma = 2.0", "gamma = -2.0"))
    assert info.value.key == "mlo.gamma" and info.value.line == 5


def test_syntax_error_is_config_error():
    with pytest.raises(C.ConfigError, match="TOML syntax"):
        C.loads("[mlo\nsteps = 1\n")


def test_overrides_apply_and_parse_literals():
    cfg, eff = C.loads(BASE, ["mlo.steps=9", "hypergrad.engine=cg", "mlo.lambda_init=[0.2, 0.3, 0.5]"])
    assert cfg.mlo.steps == 9 and cfg.mlo.hypergrad.engine == "cg"
    assert eff["mlo"]["lambda_init"] == [0.2, 0.3, 0.5]


@pytest.mark.parametrize("item", ["mlo.stepz=1", "nosuch.x=1", "steps", "a.b.c=1", "rootless=1"])
def test_bad_overrides_name_the_flag(item):
    with pytest.raises(C.ConfigError, match="--set"):
        C.loads(BASE, [item])


def test_bad_override_value_attributed_to_flag():
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE, ["mlo.gamma=-1"])
    assert info.value.key == "--set mlo.gamma"
    with pytest.raises(C.ConfigError) as info:
        C.loads(BASE, ["mlo.steps=abc"])
    assert info.value.key == "--set mlo.steps"


def test_seed_argument_overrides_file():
    cfg, eff = C.loads(BASE + "\n[task]\naligned = 0\n", seed=11)
    assert cfg.mlo.seed == 11 and eff["mlo"]["seed"] == 11


def test_blo_gamma_parsed_and_optional():
    assert C.loads(BASE)[0].mlo.blo_gamma is None
    cfg, _ = C.loads(BASE.replace("gamma = 2.0", "gamma = 2.0\nblo_gamma = 1"))
    assert cfg.mlo.blo_gamma == 1.0 and isinstance(cfg.mlo.blo_gamma, float)


@pytest.mark.parametrize("text", [BASE, BASE + "\n[hypergrad]\nengine = \"neumann\"\nneumann_terms = 7\n",
                                  "[problem]\nkind = \"quadratic\"\n[oracle]\nlambda = [0.5, 0.5]\n"])
def test_effective_dict_round_trips(text):
    cfg, eff = C.loads(text)
    assert C.effective_dict(cfg) == eff
    cfg2, eff2 = C.from_document(json.loads(json.dumps(eff)))
    assert eff2 == eff and C.effective_dict(cfg2) == eff


def test_quadratic_custom_instance_validated():
    text = "[problem]\nkind = \"quadratic\"\n[quadratic]\npreset = \"custom\"\ncenters = [[1.0, 0.0]]\n"
    with pytest.raises(C.ConfigError, match="quadratic"):
        C.loads(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load(tmp_path / "nope.toml")


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.toml")):
        text = path.read_text()
        if "[[tasks]]" in text:
            C.loads_suite(text)
        else:
            C.loads(text)


# suites -------------------------------------------------------------------------------


def test_suite_grid_and_task_tables():
    s = C.loads_suite(SUITE)
    assert s.seeds == [0, 1] and s.modes == ["trilevel", "fixed-lambda"]
    assert [n for n, _ in s.tasks] == ["a", "b"]
    eff = s.run_eff(1, 1, "fixed-lambda", "out")
    assert eff["task"]["aligned"] == 1 and eff["task"]["proj_dim"] == 2
    assert eff["mlo"]["seed"] == 1 and eff["engine"]["mode"] == "fixed-lambda"
    assert C.build(eff).task.aligned == 1


def test_suite_seed_offsets_every_seed():
    assert C.loads_suite(SUITE, seed=100).seeds == [100, 101]


def test_suite_task_overrides_apply():
    s = C.loads_suite(SUITE, ["task.n_train=40"])
    assert all(t["task"]["n_train"] == 40 for _, t in s.tasks)


@pytest.mark.parametrize("bad,match", [
    (SUITE.split("[[tasks]]")[0], "tasks"),
    (SUITE.replace('name = "b"', 'name = "a"'), "unique"),
    (SUITE.replace("aligned = 1", "alined = 1"), "unknown"),
    (SUITE.replace('"fixed-lambda"', '"maml"'), "modes"),
    (SUITE.replace("seeds = [0, 1]", "seeds = []"), "seeds"),
    (SUITE.replace("aligned = 1", "aligned = 9"), "tasks"),
])
def test_suite_rejections(bad, match):
    with pytest.raises(C.ConfigError, match=match):
        C.loads_suite(bad)


def test_suite_rejects_quadratic():
    with pytest.raises(C.ConfigError, match="synthetic"):
        C.loads_suite(SUITE + "\n[problem]\nkind = \"quadratic\"\n")
