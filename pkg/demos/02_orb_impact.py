"""How much does correcting for selective reporting move the conclusions?

The D measure is the Hellinger distance between the posterior of the pooled
effects with and without the correction.  It lies in [0, 1] and comes with
overlapping interpretation bands plus a reference distribution from a large
collection of published reviews.
"""
from absorb.impact import d_measure
from absorb.sampler import Model, SamplerConfig, run_mcmc

from _common import demo_dataset, iterations

dataset, _ = demo_dataset()
config = SamplerConfig(n_iter=iterations(20_000, 2_000), burn_in=iterations(5_000, 500), seed=1)
corrected, _ = run_mcmc(Model.ABSORB, dataset, config=config)
naive, _ = run_mcmc(Model.NBC, dataset, config=config)

report = d_measure(corrected, naive)
for key in ("d1", "d2", "d12"):
    print(f"{key:>3} = {getattr(report, key):.3f}  bands: {', '.join(report.bands[key])}"
          f"  (percentile among published reviews: {report.percentiles[key]}%)")

# Interval overlap tells a similar story in a single number per outcome.
for name in ("mu1", "mu2"):
    print(f"Jaccard overlap of the 95% intervals for {name}: {report.jaccard[name]:.2f}")
