# %% [markdown]
# # Sending a van to clients who have been away too long
#
# The van visits a few areas in rotation.  A client whose absence exceeds
# the 90% quantile of their active return time gets a message when the van
# is nearby.  With probability p_s they come to the van.

# %%
import numpy as np

from sepmodel.initiation import NegBinomParams
from sepmodel.intervene import (
    GeoClient,
    Geography,
    InterventionConfig,
    intervention_sweep,
    notification_threshold,
    select_van_sites,
)
from sepmodel.phase_type import CoxianParams
from sepmodel.simulate import ClientModel, SimConfig

params = CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], exit_p=0.0981)
print("notify after", round(notification_threshold(params), 2), "days away")

# %%
rng = np.random.default_rng(4)
P = 1000
geo = Geography.synthetic(40, seed=2)
area = rng.integers(0, 40, P)
at_risk = rng.random(P) < 0.224
clients = [GeoClient(i, geo.codes[a], tuple(geo.coords[a]), bool(r))
           for i, (a, r) in enumerate(zip(area, at_risk))]
sites = select_van_sites(clients, 5, 5.0, geo)
print("van sites:", sites)

# %%
model = ClientModel(np.tile(params.beta, (P, 1)), np.tile(params.gamma, (P, 1)),
                    np.full(P, params.exit_p))
rows = intervention_sweep(model, NegBinomParams(3, 0.59725), area, at_risk, geo,
                          InterventionConfig(van_sites=tuple(sites)),
                          SimConfig(warmup_days=3000, seed=1, replications=4),
                          p_s_values=(0.0, 0.03, 0.09))
for ps, out in rows:
    print(f"p_s={ps:.2f}: {out.avg_daily_arrivals:6.2f} visits/day, "
          f"{out.total_interventions:7.1f} van visits, {out.risky_interventions:6.1f} at-risk")
