"""Analytic Gaussian fixtures for the side-information and mixture experiments."""
import math
from dataclasses import dataclass

import numpy as np

from core_sampling import GaussianModel, MixtureModel, as_points

LN2 = math.log(2.0)


@dataclass(frozen=True)
class GaussianWZ:
    """V ~ N(0, var_v), T = V + noise(var_t_given_v), W = V + noise(var_w_given_v), k i.i.d. coordinates."""
    var_v: float = 1.0
    var_t_given_v: float = 0.01
    var_w_given_v: float = 0.01
    k: int = 1

    def __post_init__(self):
        if self.var_v <= 0 or self.var_w_given_v <= 0 or self.var_t_given_v < 0:
            raise ValueError(f"invalid variances for {self}")
        if self.k < 1:
            raise ValueError(f"dimension must be >= 1, got {self.k}")
        if self.posterior_var <= 0:
            raise ValueError(f"posterior variance is not positive for {self}")

    @property
    def var_t(self):
        return self.var_v + self.var_t_given_v

    @property
    def var_w(self):
        return self.var_v + self.var_w_given_v

    @property
    def gain(self):
        return self.var_v / self.var_t

    @property
    def posterior_var(self):
        return self.var_w - self.var_v ** 2 / self.var_t

    @property
    def side_info_var(self):
        # error variance of E[V|T]
        return (1.0 - self.gain) * self.var_v

    def source(self) -> GaussianModel:
        return GaussianModel(0.0, self.var_v, dim=self.k)

    def marginal_w(self) -> GaussianModel:
        return GaussianModel(0.0, self.var_w, dim=self.k)

    def target(self, v) -> GaussianModel:
        return GaussianModel(v, self.var_w_given_v, dim=self.k)

    def side_channel(self, v) -> GaussianModel:
        if self.var_t_given_v == 0:
            raise ValueError("noiseless side channel has no density")
        return GaussianModel(v, self.var_t_given_v, dim=self.k)

    def posterior_w_given_t(self, t) -> GaussianModel:
        return GaussianModel(self.gain * np.asarray(t, dtype=np.float64), self.posterior_var, dim=self.k)

    def posterior_v_given_t(self, t):
        """(mean, variance) of V given T."""
        return self.gain * np.asarray(t, dtype=np.float64), self.side_info_var

    def info_density(self, w, v, t) -> np.ndarray:
        """i(w; v | t) in bits, summed over coordinates; one value per row."""
        w = as_points(w, self.k)
        v = as_points(v, self.k)
        t = as_points(t, self.k)
        log_target = -0.5 * (np.log(2 * np.pi * self.var_w_given_v) + (w - v) ** 2 / self.var_w_given_v)
        mean = self.gain * t
        log_post = -0.5 * (np.log(2 * np.pi * self.posterior_var) + (w - mean) ** 2 / self.posterior_var)
        return (log_target - log_post).sum(axis=1) / LN2

    def cmi_bits(self):
        """I(W; V | T) in bits."""
        return self.k * 0.5 * math.log2(self.posterior_var / self.var_w_given_v)

    def ivw_fuse(self, w, t):
        """Inverse-variance fusion of W and E[V|T]."""
        w = np.asarray(w, dtype=np.float64)
        mean_t, var_t = self.posterior_v_given_t(t)
        if var_t == 0:
            return mean_t
        precision_w = 1.0 / self.var_w_given_v
        precision_t = 1.0 / var_t
        return (w * precision_w + mean_t * precision_t) / (precision_w + precision_t)

    def side_info_estimate(self, t):
        return self.posterior_v_given_t(t)[0]


def posterior_w_given_t(model: GaussianWZ, t) -> GaussianModel:
    return model.posterior_w_given_t(t)


def info_density(model: GaussianWZ, w, v, t):
    return model.info_density(w, v, t)


def ivw_fuse(model: GaussianWZ, w, t):
    return model.ivw_fuse(w, t)


@dataclass(frozen=True)
class GaussMix:
    """X ~ (N(m,1) + N(-m,1))/2 observed through Y = X + N(0, D)."""
    m: float = 512.0
    d: float = 1.0

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"channel variance must be positive, got {self.d}")

    def source(self) -> MixtureModel:
        return MixtureModel([GaussianModel(self.m, 1.0), GaussianModel(-self.m, 1.0)])

    def components(self):
        return GaussianModel(self.m, 1.0 + self.d), GaussianModel(-self.m, 1.0 + self.d)

    def output(self) -> MixtureModel:
        return MixtureModel(list(self.components()))

    def channel(self, x) -> GaussianModel:
        return GaussianModel(x, self.d)

    def mixture_densities(self, points, x=None):
        """Log densities of every model of the fixture at the given points."""
        first, second = self.components()
        out = {
            "p_x": self.source().log_density(points),
            "p_y": self.output().log_density(points),
            "p1": first.log_density(points),
            "p2": second.log_density(points),
        }
        if x is not None:
            out["p_y_given_x"] = self.channel(x).log_density(points)
        return out


def mixture_densities(mix: GaussMix, points, x=None):
    return mix.mixture_densities(points, x)
