"""Entire studies can go missing too.

When the number K of studies that reported neither outcome is known, the
extended model adds one term per missing study: the probability that both
of its latent reporting variables were negative.  The missing studies'
standard errors are unknown and are sampled within the observed range.
"""
from dataclasses import replace

from absorb.sampler import Model, SamplerConfig, run_mcmc, summarize

from _common import demo_dataset, iterations

dataset, _ = demo_dataset(ism_mode=True)
k = dataset.k_missing             # rows that reported nothing are counted, not dropped
print(f"{k} studies in the file report neither outcome")

config = SamplerConfig(n_iter=iterations(20_000, 2_000), burn_in=iterations(5_000, 500), seed=2)
for label, model, ds in (("ignore them", Model.ABSORB, replace(dataset, k_missing=0)),
                         (f"K={k}", Model.ABSORB_ISM, replace(dataset, k_missing=k))):
    draws, _ = run_mcmc(model, ds, config=config)
    s = summarize(draws)
    print(f"{label:>12}: mu1={s['mu1']['mean']:+.3f}  mu2={s['mu2']['mean']:+.3f}  "
          f"gamma01={s['gamma01']['mean']:+.2f}  gamma02={s['gamma02']['mean']:+.2f}")

# Knowing that studies vanished pushes the intercepts of the reporting model
# down, which in turn strengthens the correction of the pooled effects.
