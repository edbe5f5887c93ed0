import pytest

from glassdepth.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    dump_config,
    from_flat_json,
    load_config,
    parse_text,
    section_hash,
    to_flat,
    to_flat_json,
)


def test_dump_load_round_trip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), {"train.train_on_plan": "yes", "geometry.cg_tol": "1e-10",
                                               "denoiser.feat_channels": "4, 8,8", "codec.seed": "3"})
    (tmp_path / "c.txt").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.txt") == cfg
    assert from_flat_json(to_flat_json(cfg)) == cfg


def test_defaults_untouched_by_overrides():
    base = ExperimentConfig()
    apply_overrides(base, {"train.lr": "1"})
    assert base.train.lr == 2e-4


def test_comments_and_blank_lines():
    assert parse_text("# c\n\n a.b = 1 # trailing\n") == {"a.b": "1"}


@pytest.mark.parametrize("pairs", [
    {"train.bogus": "1"}, {"train.epochs": "1.5"}, {"train.train_on_plan": "maybe"},
    {"schedule.beta_end": "2"}, {"train.inference_count": "0"}, {"denoiser.condition_mode": "depth"},
])
def test_invalid(pairs):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), pairs)


def test_section_hash_scoped():
    a = ExperimentConfig()
    b = apply_overrides(a, {"train.lr": "0.1"})
    assert section_hash(a, "geometry") == section_hash(b, "geometry")
    assert section_hash(a, "train") != section_hash(b, "train")


def test_flat_keys_cover_all_sections():
    sections = {k.split(".")[0] for k in to_flat(ExperimentConfig())}
    assert sections == {"schedule", "geometry", "data", "codec", "denoiser", "train", "eval"}
