"""Concrete bilevel problems with hand-coded derivatives and declared constants."""

from .logistic import LogisticBilevel, synth_logistic_dataset
from .quadratic import QuadraticBilevel, quadratic_oracle
from .robust import RobustLossWrapper
from .tv import TVDenoise, psnr, synth_tv_dataset

__all__ = [
    "LogisticBilevel",
    "QuadraticBilevel",
    "RobustLossWrapper",
    "TVDenoise",
    "psnr",
    "quadratic_oracle",
    "synth_logistic_dataset",
    "synth_tv_dataset",
]
