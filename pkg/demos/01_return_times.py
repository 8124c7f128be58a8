# %% [markdown]
# # How long until a client comes back?
#
# A returning client is either in a fast "active" rhythm or first drifts
# through a slow "passive" stretch.  The return time is then a two-branch
# mixture: a single exponential, or that exponential plus a slow one.

# %%
import numpy as np

from sepmodel import phase_type as ph

params = ph.CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], exit_p=0.0981)
print("mean gap (days):", round(ph.coxian_mean(params), 2))
for q in (0.5, 0.9, 0.99):
    print(f"{q:.0%} of returns happen within {ph.coxian_quantile(params, q):7.1f} days")

# %% [markdown]
# An exponential with the same mean badly underestimates long absences.

# %%
mean = ph.coxian_mean(params)
for t in (100, 300, 600, 1000):
    print(f"P(gap > {t:4d}) mixture {ph.coxian_sf(params, t):.2e}   exponential {np.exp(-t / mean):.2e}")

# %% [markdown]
# The longer someone has been away, the more likely they are on the slow
# branch.  This is what an outreach policy keys on.

# %%
for t in (0, 30, 60, 90, 180):
    print(f"away {t:3d} days -> P(passive) = {ph.passive_posterior(params, t):.3f}")

# %%
# cross-check against the generator-matrix form
gen = ph.GeneratorMatrix.from_coxian(params)
t = 75.0
print("closed form", ph.coxian_pdf(params, t), " matrix exponential", ph.general_ph_pdf(gen, t))
