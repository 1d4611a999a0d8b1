"""Bundled simulation settings: full-scale tables and desk-scale variants."""

from typing import Dict, List

from ib_bias.config import SimSetting
from ib_bias.errors import InvalidParameterError

CONTAMINATION_RATE = 0.02


def _lrm(name: str, **overrides) -> SimSetting:
    fields = dict(
        name=name,
        model="LRM",
        q=200,
        n=2000,
        H=500,
        replicates=500,
        delta=0.01,
        faithful=True,
        source_epv=5.0,
    )
    fields.update(overrides)
    return SimSetting(**fields)


def _glmm(name: str, **overrides) -> SimSetting:
    fields = dict(
        name=name,
        model="LRM_RandomIntercept",
        q=29,
        m=5,
        n_i=50,
        H=200,
        replicates=1000,
        sigma2_true=1.5,
        delta=0.01,
        faithful=True,
        source_epv=4.0,
    )
    fields.update(overrides)
    return SimSetting(**fields)


def _build() -> Dict[str, SimSetting]:
    settings = [
        _lrm("table1_setting1"),
        _lrm("table1_setting2", n=3000, covariate_mean=0.6, source_epv=3.75),
        _lrm("table1_setting1_contaminated", contamination_rate=CONTAMINATION_RATE),
        _lrm(
            "table1_setting2_contaminated",
            n=3000,
            covariate_mean=0.6,
            source_epv=3.75,
            contamination_rate=CONTAMINATION_RATE,
        ),
        _glmm("table2_setting1"),
        _glmm("table2_setting2", m=50, n_i=5),
        # Desk scale: same beta pattern and covariate rule, minutes instead of hours.
        _lrm("lrm_desk", q=20, n=200, H=100, replicates=200),
        _lrm(
            "lrm_desk_contaminated",
            q=20,
            n=200,
            H=100,
            replicates=200,
            contamination_rate=CONTAMINATION_RATE,
        ),
        _glmm(
            "glmm_desk",
            q=6,
            m=20,
            n_i=5,
            H=50,
            replicates=200,
            faithful=False,
            source_epv=None,
        ),
    ]
    return {setting.name: setting for setting in settings}


PRESETS: Dict[str, SimSetting] = _build()


def preset_names() -> List[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> SimSetting:
    """Copy of a bundled setting; raises InvalidParameterError for unknown names."""
    try:
        return PRESETS[name].model_copy(deep=True)
    except KeyError:
        raise InvalidParameterError(
            f"unknown preset {name!r}; choose from {', '.join(preset_names())}"
        ) from None
