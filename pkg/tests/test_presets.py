import dataclasses

import pytest

from fedlab.config import ExperimentConfig, parse_config, render_config
from fedlab.errors import ConfigError
from fedlab.presets import CATALOG, NAMES, desk_version, is_toy, preset, preset_text
from fedlab.runner import run_experiment
from fedlab.toyrun import ToyConfig

EXPERIMENTS = [n for n in NAMES if not is_toy(n)]


def test_catalog_names():
    assert set(CATALOG) == {
        "fig2_cl_to_fl", "fig3_matched_u", "fig4_hparams_iid", "fig5_pp_iid", "fig7_imbalance",
        "fig9_dirichlet", "fig9_pp_noniid", "fig10_traces", "fig11_cosine", "toy_fig1", "toy_fig8",
    }


@pytest.mark.parametrize("name", NAMES)
@pytest.mark.parametrize("desk", [False, True])
def test_presets_parse_and_round_trip(name, desk):
    cfg = preset(name, desk)
    if is_toy(name):
        assert isinstance(cfg, ToyConfig)
        return
    assert parse_config(render_config(cfg)) == cfg
    for _, v in cfg.resolved():
        if desk:
            assert v.dataset == "synth" and v.model == "mlp"
        else:
            assert v.dataset == "cifar10" and v.model == "paper_cnn" and v.R == 100


def test_unknown_preset_lists_catalog():
    with pytest.raises(ConfigError) as err:
        preset("fig6")
    for name in CATALOG:
        assert name in str(err.value)


def test_fig2_sweeps_clients_with_fixed_hyperparameters():
    vs = preset("fig2_cl_to_fl").resolved()
    assert [v.K for _, v in vs] == [1, 10, 50]
    assert {(v.B, v.eta_l, v.E) for _, v in vs} == {(500, 0.005, 1)}


@pytest.mark.parametrize("desk", [False, True])
def test_fig3_variants_share_effective_update(desk):
    cfg = preset("fig3_matched_u", desk)
    assert cfg.match_u
    us = {v.effective_update() for _, v in cfg.resolved()}
    assert len(us) == 1
    assert {v.K for _, v in cfg.resolved()} == {1, 10, 50}


def test_fig9_sweeps_alpha_with_three_repeats():
    vs = dict(preset("fig9_dirichlet").resolved())
    assert sorted(v.alpha for k, v in vs.items() if k != "iid") == [0.1, 0.5, 1.0, 10.0]
    assert all(v.repeats == 3 for v in vs.values())
    assert vs["iid"].partition == "iid"


def test_sweep_presets_cover_their_grids():
    fig5 = [v.C_frac for _, v in preset("fig5_pp_iid").resolved()]
    assert fig5 == [0.1, 0.2, 0.5, 1.0]
    fig7 = {(v.sgm, v.agg) for _, v in preset("fig7_imbalance").resolved()}
    assert fig7 == {(s, a) for s in (0.0, 0.3, 0.6, 0.9) for a in ("weighted", "naive")}
    pp = preset("fig9_pp_noniid")
    assert [v.C_frac for _, v in pp.resolved()] == [0.1, 0.2, 0.5, 1.0]
    assert pp.alpha == 0.1 and pp.repeats == 3
    fig4 = {k: v for k, v in preset("fig4_hparams_iid").resolved()}
    assert {v.E for v in fig4.values()} == {1, 2, 5}
    assert {v.B for v in fig4.values()} == {5, 50, 500}
    assert {v.eta_l for v in fig4.values()} == {0.001, 0.005, 0.01, 0.05}


def test_desk_version_of_full_config():
    cfg = desk_version(preset("fig9_dirichlet"))
    assert cfg.dataset == "synth" and cfg.model == "mlp" and cfg.R == 20 and cfg.cifar_path is None
    assert len(cfg.resolved()) == 5


def _shrink(cfg: ExperimentConfig) -> ExperimentConfig:
    # keep every variant but cut rounds and repeats so the whole catalog runs quickly
    return dataclasses.replace(cfg, R=2, seeds=cfg.seeds[:1])


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_desk_presets_run_end_to_end(name, tmp_path):
    cfg = _shrink(preset(name, desk=True))
    manifest = run_experiment(cfg, tmp_path)
    assert manifest.ok
    assert set(manifest.aggregates) == {label for label, _ in cfg.resolved()}
    assert (tmp_path / "manifest.json").exists()
