"""Settings and constants for confmaplib
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import computed_field

from .confidence import RwParams
from .sparse import Preconditioner



class Settings(BaseSettings):
    """Defaults for the solvers, oracles and CLI

    Every field can be overridden with a CONFMAP_ prefixed environment
    variable, e.g. CONFMAP_BETA=120.
    """
    model_config = SettingsConfigDict(env_prefix='CONFMAP_')

    alpha: float = 2.0
    beta: float = 90.0
    gamma: float = 0.05
    epsilon: float = 1e-6
    tol: float = 1e-6
    max_iter_factor: int = 10
    preconditioner: Preconditioner = 'ilu'
    mc_walks: int = 50_000
    mc_seed: int = 0
    workers: int = 1
    log_level: str = 'WARNING'
    csv_digits: int = 6
    toy_lr: float = 0.1
    toy_epochs: int = 200
    toy_batch: int = 256

    @computed_field
    @property
    def csv_float_format(self) -> str:
        return f'%.{self.csv_digits}g'

    def rw_params(self) -> RwParams:
        """Random-walk parameters built from these settings"""
        return RwParams(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            epsilon=self.epsilon,
            tol=self.tol,
            max_iter_factor=self.max_iter_factor,
            preconditioner=self.preconditioner,
        )
