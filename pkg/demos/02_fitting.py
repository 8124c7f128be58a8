# %% [markdown]
# # Fitting return-time models to censored gaps
#
# Each client contributes its completed gaps plus one right-censored gap,
# from its last visit to the end of the window.  A censored gap means
# either "left for good" or "not back yet".

# %%
import time

import numpy as np

from sepmodel.fit import fit_contextual, fit_featureless
from sepmodel.likelihood import RegressionCoefficients
from sepmodel.phase_type import CoxianParams
from sepmodel.simulate import ClientModel, sample_observations

truth = CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], exit_p=0.0981)
rng = np.random.default_rng(1)
obs = sample_observations(truth, rng.uniform(0, 400, 5000), 540.0, rng)
print(len(obs.uncensored_t), "completed gaps,", len(obs.censored_t), "censored")

# %%
t0 = time.perf_counter()
res = fit_featureless(obs, seed=0)
fitted = res.params_or_coeffs
print(f"fit in {time.perf_counter() - t0:.1f} s, converged={res.converged}")
print("beta ", fitted.beta.round(4), " truth", truth.beta)
print("gamma", fitted.gamma.round(5), " truth", truth.gamma)
print("exit ", round(fitted.exit_p, 4), " truth", truth.exit_p)
print("log-likelihood by start:", np.round(res.start_objectives, 2))

# %% [markdown]
# ## Client features
#
# Features shift the exit probability through a logistic link, and shift
# the mixture weights and rates linearly.  Here one feature makes clients
# leave sooner and another speeds up the active rhythm.

# %%
V = 1500
X = rng.standard_normal((V, 2))
coeffs = RegressionCoefficients.featureless(truth, ("leaves_sooner", "faster"))
coeffs.rho[1] = 0.7
coeffs.g[0, 2] = 0.01
obs = sample_observations(ClientModel.from_coefficients(coeffs, X), rng.uniform(0, 1500, V),
                          2310.0, rng)
res = fit_contextual(obs, X, truth, feature_names=coeffs.feature_names)
est = res.params_or_coeffs
print("exit-link coefficients ", est.rho[1:].round(3), " truth", coeffs.rho[1:])
print("active-rate coefficients", est.g[0, 1:].round(4), " truth", coeffs.g[0, 1:])
