"""Latent-sigmoid disease progression modeling with variational training,
personalized forecasting, benchmark predictors and an evaluation harness."""

__version__ = "0.1.0"

from .cohort import Cohort, History, Subject, TargetInfo
from .core_model import LatentState, ModelParams, ParameterDomainError
from .inference import TrainConfig, VariationalState, train
from .prediction import FittedModel, PosteriorForecast, forecast, personalize
