"""Named experiment configurations.

Every preset exists in two forms. The full form trains the CNN on CIFAR-10
for 100 rounds; the desk form swaps in the synthetic blobs and an MLP with
step sizes retuned for that data, and finishes in about a minute on one core.
Toy presets are cheap, so both forms are the same.
"""

from __future__ import annotations

from fedlab.config import ExperimentConfig, parse_config, render_config
from fedlab.errors import ConfigError
from fedlab.toyrun import ToyConfig, parse_toy_config

CIFAR_PATH = "data/cifar-10-batches-bin"

_FULL_HEAD = f"""dataset=cifar10
model=paper_cnn
cifar_path={CIFAR_PATH}
R=100
"""

_DESK_HEAD = """dataset=synth
model=mlp
"""

# K=10, E=1, B=50, eta=0.005 is the common starting point of every sweep.
_FULL_BASE = "K=10\nE=1\nB=50\neta_l=0.005\n"
# desk analogue: 200 samples per client, larger steps for the easier data
_DESK_BASE = "K=10\nE=1\nB=20\neta_l=0.05\nR=20\n"
# setting used for the non-IID comparisons at desk scale
_DESK_NONIID = "K=10\nE=10\nB=200\neta_l=0.1\nR=50\n"

_FULL: dict[str, str] = {
    "base": _FULL_BASE + "partition=iid\n",
    "fig2_cl_to_fl": """partition=iid
K=10
E=1
B=500
eta_l=0.005
variant.K1=K:1
variant.K10=K:10
variant.K50=K:50
""",
    "fig3_matched_u": """partition=iid
K=1
E=1
B=500
eta_l=0.005
match_u=true
variant.K1=K:1
variant.K10_B=K:10 B:50
variant.K10_E=K:10 E:10
variant.K10_eta=K:10 eta_l:0.05
variant.K50_B=K:50 B:10
variant.K50_E=K:50 E:50
variant.K50_eta=K:50 eta_l:0.25
""",
    "fig4_hparams_iid": _FULL_BASE + """partition=iid
variant.base=
variant.E2=E:2
variant.E5=E:5
variant.B5=B:5
variant.B500=B:500
variant.eta0001=eta_l:0.001
variant.eta001=eta_l:0.01
variant.eta005=eta_l:0.05
""",
    "fig5_pp_iid": _FULL_BASE + """partition=iid
variant.C01=C_frac:0.1
variant.C02=C_frac:0.2
variant.C05=C_frac:0.5
variant.C1=C_frac:1.0
""",
    "fig7_imbalance": _FULL_BASE + """partition=sgm
sgm=0
variant.sgm0_weighted=sgm:0 agg:weighted
variant.sgm03_weighted=sgm:0.3 agg:weighted
variant.sgm06_weighted=sgm:0.6 agg:weighted
variant.sgm09_weighted=sgm:0.9 agg:weighted
variant.sgm0_naive=sgm:0 agg:naive
variant.sgm03_naive=sgm:0.3 agg:naive
variant.sgm06_naive=sgm:0.6 agg:naive
variant.sgm09_naive=sgm:0.9 agg:naive
""",
    "fig9_dirichlet": _FULL_BASE + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.iid=partition:iid
variant.a01=alpha:0.1
variant.a05=alpha:0.5
variant.a1=alpha:1.0
variant.a10=alpha:10
""",
    "fig9_pp_noniid": _FULL_BASE + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.C01=C_frac:0.1
variant.C02=C_frac:0.2
variant.C05=C_frac:0.5
variant.C1=C_frac:1.0
""",
    "fig10_traces": _FULL_BASE + """partition=dirichlet
alpha=0.1
variant.iid=partition:iid
variant.a01=alpha:0.1
""",
    "fig11_cosine": _FULL_BASE + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.iid=partition:iid
variant.a01=alpha:0.1
""",
}

_DESK: dict[str, str] = {
    "base": _DESK_BASE + "partition=iid\n",
    "fig2_cl_to_fl": """partition=iid
E=1
B=200
eta_l=0.05
R=20
K=10
variant.K1=K:1
variant.K10=K:10
variant.K50=K:50
""",
    # 2000 samples, so u = 0.5 for every variant
    "fig3_matched_u": """partition=iid
K=1
E=1
B=200
eta_l=0.05
R=20
match_u=true
variant.K1=K:1
variant.K10_B=K:10 B:20
variant.K10_E=K:10 E:10
variant.K10_eta=K:10 eta_l:0.5
variant.K50_B=K:50 B:4
variant.K50_E=K:50 E:50
variant.K50_eta=K:50 eta_l:2.5
""",
    "fig4_hparams_iid": _DESK_BASE + """partition=iid
variant.base=
variant.E2=E:2
variant.E5=E:5
variant.B5=B:5
variant.B200=B:200
variant.eta001=eta_l:0.01
variant.eta01=eta_l:0.1
variant.eta05=eta_l:0.5
""",
    "fig5_pp_iid": _DESK_BASE + """partition=iid
variant.C01=C_frac:0.1
variant.C02=C_frac:0.2
variant.C05=C_frac:0.5
variant.C1=C_frac:1.0
""",
    "fig7_imbalance": _DESK_BASE + """partition=sgm
sgm=0
variant.sgm0_weighted=sgm:0 agg:weighted
variant.sgm03_weighted=sgm:0.3 agg:weighted
variant.sgm06_weighted=sgm:0.6 agg:weighted
variant.sgm09_weighted=sgm:0.9 agg:weighted
variant.sgm0_naive=sgm:0 agg:naive
variant.sgm03_naive=sgm:0.3 agg:naive
variant.sgm06_naive=sgm:0.6 agg:naive
variant.sgm09_naive=sgm:0.9 agg:naive
""",
    "fig9_dirichlet": _DESK_NONIID + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.iid=partition:iid
variant.a01=alpha:0.1
variant.a05=alpha:0.5
variant.a1=alpha:1.0
variant.a10=alpha:10
""",
    "fig9_pp_noniid": _DESK_BASE + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.C01=C_frac:0.1
variant.C02=C_frac:0.2
variant.C05=C_frac:0.5
variant.C1=C_frac:1.0
""",
    "fig10_traces": _DESK_NONIID + """partition=dirichlet
alpha=0.1
variant.iid=partition:iid
variant.a01=alpha:0.1
""",
    "fig11_cosine": _DESK_NONIID + """partition=dirichlet
alpha=0.1
seeds=0,1,2
variant.iid=partition:iid
variant.a01=alpha:0.1
""",
}

# three clients whose minimizers spread around the optimum
_TOY_FIG1 = """toy=fig1
eta=0.1
steps=60
batch_size=2
seed=0
theta0=-2.5,2.5
client.0.A=2,0,0,1
client.0.m=1,1
client.1.A=1,0.5,0.5,1
client.1.m=-1,0.5
client.2.A=1,0,0,3
client.2.m=0.5,-1
"""

# Two clients with swapped curvature: averaging local optima misses theta*.
_TOY_FIG8 = """toy=fig8
eta=0.1
I=50
syncs=20
theta0=-1,3
client.0.A=1,0,0,4
client.0.m=0,0
client.1.A=4,0,0,1
client.1.m=2,2
"""

_TOY = {"toy_fig1": _TOY_FIG1, "toy_fig8": _TOY_FIG8}

CATALOG = (
    "fig2_cl_to_fl", "fig3_matched_u", "fig4_hparams_iid", "fig5_pp_iid", "fig7_imbalance",
    "fig9_dirichlet", "fig9_pp_noniid", "fig10_traces", "fig11_cosine", "toy_fig1", "toy_fig8",
)
NAMES = ("base",) + CATALOG


def is_toy(name: str) -> bool:
    return name in _TOY


def preset_text(name: str, desk: bool = False) -> str:
    if name in _TOY:
        return _TOY[name] + f"output_dir=out/{name}\n"
    table = _DESK if desk else _FULL
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(NAMES)}")
    head = _DESK_HEAD if desk else _FULL_HEAD
    suffix = "_desk" if desk else ""
    return f"name={name}{suffix}\n{head}{table[name]}output_dir=out/{name}{suffix}\n"


def preset(name: str, desk: bool = False) -> ExperimentConfig | ToyConfig:
    """Parsed preset; ``desk=True`` selects the synthetic, reduced form."""
    text = preset_text(name, desk)
    return parse_toy_config(text) if name in _TOY else parse_config(text)


def desk_version(cfg: ExperimentConfig, max_rounds: int = 20) -> ExperimentConfig:
    """Generic desk substitute for an arbitrary config.

    CIFAR-10 becomes the default synthetic blobs, the CNN becomes the default
    MLP and R is capped. Step sizes are left alone.
    """
    lines = []
    for line in render_config(cfg).splitlines():
        key, value = line.split("=", 1)
        if key == "dataset":
            value = "synth"
        elif key == "model" and value == "paper_cnn":
            value = "mlp"
        elif key == "R":
            value = str(min(int(value), max_rounds))
        elif key == "cifar_path":
            continue
        elif key.startswith("variant."):
            value = " ".join(_desk_override(tok, max_rounds) for tok in value.split())
            value = " ".join(t for t in value.split() if t)
        lines.append(f"{key}={value}")
    return parse_config("\n".join(lines) + "\n")


def _desk_override(token: str, max_rounds: int) -> str:
    key, value = token.split(":", 1)
    if key == "cifar_path":
        return ""
    if key == "dataset":
        return "dataset:synth"
    if key == "model" and value == "paper_cnn":
        return "model:mlp"
    if key == "R":
        return f"R:{min(int(value), max_rounds)}"
    return token
