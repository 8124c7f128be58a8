# %% [markdown]
# # The whole service as a queue of lifecycles
#
# New clients arrive in negative-binomial numbers each day, come back after
# mixture-distributed gaps, and leave with a fixed probability at each visit.
# In steady state, daily visits = new clients per day x visits per client,
# where visits per client averages 1/p.

# %%
import numpy as np

from sepmodel.initiation import NegBinomParams
from sepmodel.phase_type import CoxianParams
from sepmodel.simulate import SimConfig, histogram_bins, mean_ci, run_replications

params = CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], exit_p=0.0981)
arrivals = NegBinomParams(3, 0.59725)
print("new clients per day:", round(arrivals.mean, 3))
print("renewal estimate of daily visits:", round(arrivals.mean / params.exit_p, 2))

# %%
outs = run_replications(params, arrivals, SimConfig(seed=3, replications=5))
m, h = mean_ci([o.avg_daily_arrivals for o in outs])
print(f"simulated daily visits: {m:.2f} +- {h:.2f}")

# %% [markdown]
# Gaps longer than a few months are far more common than an exponential
# with the same mean would allow.

# %%
gaps = np.concatenate([o.gaps for o in outs])
idx, centers, counts = histogram_bins(gaps, 60)
mean = gaps.mean()
for c, n in list(zip(centers, counts))[:12]:
    expect = len(gaps) * (np.exp(-(c - 30) / mean) - np.exp(-(c + 30) / mean))
    print(f"{c:6.0f} days  simulated {n:6d}   exponential {expect:9.1f}")

# %%
soj = outs[0].sojourns
print("median first-to-last visit span in the window:", np.median(soj), "days")
