"""Flat key=value config parsing, layering, and seed resolution."""

import dataclasses

import pytest

from aqdyn.config import (
    DEFAULT_SEED,
    SEED_ENV_VAR,
    ModelSpec,
    PriorSpec,
    RunConfig,
    dump_default_config,
    load_config,
    parse_config,
    resolve_seed,
)


def test_default_template_round_trips():
    assert parse_config(dump_default_config()) == RunConfig()


def test_empty_text_gives_defaults():
    assert parse_config("") == RunConfig()


def test_comments_and_blank_lines_ignored():
    text = "\n# a comment\n\nchains = 2  # trailing note\n"
    cfg = parse_config(text)
    assert cfg.sampler.chains == 2
    assert cfg.spec == ModelSpec()


def test_unknown_key_lists_valid_keys_with_line_number():
    with pytest.raises(ValueError) as err:
        parse_config("model = blanket\nchians = 4\n")
    msg = str(err.value)
    assert "line 2" in msg
    assert "chians" in msg
    assert "chains" in msg and "warmup" in msg  # the valid-key list


def test_bad_value_reports_line_and_key():
    with pytest.raises(ValueError) as err:
        parse_config("warmup = soon\n")
    msg = str(err.value)
    assert "line 1" in msg and "warmup" in msg


def test_missing_equals_sign_rejected():
    with pytest.raises(ValueError, match="key = value"):
        parse_config("chains 4\n")


def test_model_and_variant_validated():
    with pytest.raises(ValueError, match="model must be one of"):
        parse_config("model = kriging\n")
    with pytest.raises(ValueError, match="mixing_variant"):
        parse_config("mixing_variant = quadratic\n")


def test_prior_keys_update_prior_spec():
    cfg = parse_config("prior_obs_shape = 2.5\nprior_surface_scale = 1.0\n")
    assert cfg.spec.priors.obs_shape == 2.5
    assert cfg.spec.priors.surface_scale == 1.0
    assert cfg.spec.priors.obs_rate == PriorSpec().obs_rate


def test_prior_positivity_enforced():
    with pytest.raises(ValueError, match="positive"):
        parse_config("prior_obs_rate = -1\n")


def test_optional_fields_accept_none_and_values():
    cfg = parse_config("d0_override = none\nleapfrog_steps = none\nstep_size = 0.1\n")
    assert cfg.spec.d0_override is None
    assert cfg.sampler.leapfrog_steps is None
    assert cfg.sampler.step_size == 0.1
    cfg = parse_config("d0_override = 12.5\nleapfrog_steps = 64\n")
    assert cfg.spec.d0_override == 12.5
    assert cfg.sampler.leapfrog_steps == 64


def test_bounds_require_all_four_without_base():
    with pytest.raises(ValueError, match="grid_north_min"):
        parse_config("grid_east_min = 0\ngrid_east_max = 9100\ngrid_north_max = 7000\n")
    cfg = parse_config(
        "grid_east_min = 0\ngrid_east_max = 9100\n"
        "grid_north_min = 0\ngrid_north_max = 7000\n"
    )
    assert cfg.spec.grid_bounds == (0.0, 9100.0, 0.0, 7000.0)


def test_partial_bounds_merge_over_base():
    base = parse_config(
        "grid_east_min = 0\ngrid_east_max = 9100\n"
        "grid_north_min = 0\ngrid_north_max = 7000\n"
    )
    cfg = parse_config("grid_north_max = 7500\n", base=base)
    assert cfg.spec.grid_bounds == (0.0, 9100.0, 0.0, 7500.0)


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        parse_config(
            "grid_east_min = 100\ngrid_east_max = 100\n"
            "grid_north_min = 0\ngrid_north_max = 7000\n"
        )


def test_layering_preserves_unmentioned_fields():
    base = parse_config("chains = 8\nlaplacian_scale = 0.5\n")
    cfg = parse_config("warmup = 50\n", base=base)
    assert cfg.sampler.chains == 8
    assert cfg.sampler.warmup == 50
    assert cfg.spec.laplacian_scale == 0.5


def test_spec_validation_surfaces_through_parse():
    with pytest.raises(ValueError, match="n_east_inner"):
        parse_config("n_east_inner = 2\n")
    with pytest.raises(ValueError, match="laplacian_scale"):
        parse_config("laplacian_scale = 0\n")


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("model = resampled\nseed = 99\n")
    cfg = load_config(path)
    assert cfg.spec.model == "resampled"
    assert cfg.seed == 99


def test_every_key_in_template():
    from aqdyn.config import _KEY_TABLE

    template = dump_default_config()
    grid_keys = {k for k in _KEY_TABLE if k.startswith("grid_")}
    for key in _KEY_TABLE:
        assert key in template, key
    # grid keys appear only as commented documentation
    parsed = parse_config(template)
    assert parsed.spec.grid_bounds is None
    assert grid_keys  # the doc mention is intentional, not an accident


def test_seed_precedence():
    assert resolve_seed(7, 3, environ={SEED_ENV_VAR: "5"}) == 7
    assert resolve_seed(None, 3, environ={SEED_ENV_VAR: "5"}) == 5
    assert resolve_seed(None, 3, environ={}) == 3
    assert resolve_seed(None, DEFAULT_SEED, environ={}) == DEFAULT_SEED


def test_seed_env_must_be_integer():
    with pytest.raises(ValueError, match=SEED_ENV_VAR):
        resolve_seed(None, 3, environ={SEED_ENV_VAR: "twelve"})


def test_run_config_immutable():
    cfg = RunConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 1
