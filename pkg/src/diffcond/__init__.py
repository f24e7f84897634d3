"""Conditional sampling with generative diffusions, checked against exact oracles."""
from .numerics import GaussianParams, MetricReport, RngState, ess, gaussian_logpdf, sample_gaussian
from .numerics import histogram_tv, sliced_wasserstein2
from .targets import CrescentModel, GridDensity, LinearGaussianModel, conjugate_posterior, posterior_oracle
from .sde import Path, SdeSpec, anderson_reversal, brownian_sde, euler_maruyama, ou_sde, ir_sde
from .neural import MlpSpec, Network, ParamSet
from .training import BridgePair, DsmConfig, IpfConfig, ScoreNetwork, cdsb_train, dsb_train, dsm_train
from .smc import FeynmanKacModel, ParticleEnsemble, smc_run, stratified_resample
from .hmc import HmcConfig, hmc_sample, leapfrog

__version__ = "0.1.0"
