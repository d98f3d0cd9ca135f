import pytest

from fedmom.config import AUTO, RunConfig, needs_schedule, parse_config
from fedmom.errors import ConfigError


def test_minimal_config_defaults():
    cfg = parse_config("[problem]\nkind = quadratic\n[algo]\nvariant = fedavg_m\n")
    assert cfg.problem["dim"] == 20 and cfg.problem["clients"] == 10
    assert cfg.algo["local_steps"] == 16
    assert cfg.run["rounds"] == 200 and cfg.run["seed"] == 0
    assert cfg.algo["beta"] == AUTO and needs_schedule(cfg)


def test_empty_document_is_all_defaults():
    cfg = parse_config("")
    assert cfg.algo["variant"] == "fedavg_m" and cfg.output["csv_path"] == "run.csv"


@pytest.mark.parametrize("text,key", [
    ("[problem]\nclients = 10\n[algo]\ncohort = 11\n", "algo.cohort"),
    ("[algo]\nvariant = fedavg\nbeta = 0.5\n", "algo.beta"),
    ("[algo]\nvariant = nope\n", "algo.variant"),
    ("[algo]\neta = -1\n", "algo.eta"),
    ("[problem]\ndim = 2.5\n", "problem.dim"),
    ("[problem]\nsigma = abc\n", "problem.sigma"),
    ("[problem]\ncolour = red\n", "problem.colour"),
    ("[extras]\na = 1\n", "extras"),
    ("[run]\nreplicas = 0\n", "run.replicas"),
    ("[algo]\nvariant = fedavg_mvr\nreparameterized = true\n", "algo.reparameterized"),
    ("[problem]\nkind = logistic\n", "algo.delta"),
    ("[problem]\nkind = logistic\n[run]\nx0 = equal_energy\n[algo]\ndelta = 1\n", "run.x0"),
    ("[run]\nreplicas = 2\n[output]\ncheckpoint_path = ck.json\n", "output.checkpoint_path"),
])
def test_errors_name_offending_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key


def test_pinned_beta_message():
    with pytest.raises(ConfigError, match="fedavg pins beta=1"):
        parse_config("[algo]\nvariant = fedavg\nbeta = 0.5\n")


def test_malformed_document():
    with pytest.raises(ConfigError):
        parse_config("no section header\n")


def test_logistic_with_explicit_hyperparameters_needs_no_delta():
    cfg = parse_config("[problem]\nkind = logistic\n[algo]\nbeta = 0.5\neta = 0.1\ngamma = 0.04\n"
                       "init_batches = 1\n")
    assert not needs_schedule(cfg)


def test_text_round_trip_and_overrides():
    cfg = parse_config("[algo]\nvariant = scaffold_m\ncohort = 4\nbeta = 0.25\n[run]\nrounds = 7\n")
    again = parse_config(cfg.to_text())
    assert again.to_dict() == cfg.to_dict()
    swept = cfg.with_value("algo.beta", "0.5")
    assert swept.algo["beta"] == 0.5 and cfg.algo["beta"] == 0.25
    assert RunConfig.from_dict(cfg.to_dict()).get("run.rounds") == 7
    with pytest.raises(ConfigError):
        cfg.with_value("algo.cohort", "99")
    with pytest.raises(ConfigError):
        cfg.with_value("algo.nothing", "1")


def test_inline_comments_and_booleans():
    cfg = parse_config("[algo]\nreparameterized = yes  # hatted form\n")
    assert cfg.algo["reparameterized"] is True
