"""
A variational LoG layer
=======================

Posterior samples around the LoG prior, the closed-form KL, and how it grows
as the posterior drifts away from the prior.
"""

import torch

from logbseg.bayeslayer import VariationalKernel, gaussian_kl, kl_divergence, sample_weights

vk = VariationalKernel(size=5, sigma=1.0, prior_std=0.1, init_std=0.01)
torch.set_grad_enabled(False)  # inspection only
print("posterior mean equals prior:", torch.equal(vk.mu, vk.prior_mean))
print("posterior std at init      :", float(vk.std.mean()))

g = torch.Generator().manual_seed(0)
draws = torch.stack([sample_weights(vk, g) for _ in range(2000)])
print("sample mean error          :", float((draws.mean(0) - vk.mu).abs().max()))
print("sample std                 :", float(draws.std(0).mean()))

# KL for one scalar weight, then for the whole kernel
print("KL(N(1,1) || N(0,1))       :", float(gaussian_kl(1.0, 1.0, 0.0, 1.0)))
print("kernel KL at init          :", float(kl_divergence(vk)))
for shift in (0.0, 0.05, 0.1, 0.2):
    vk.mu_free.copy_(vk.prior_mean + shift)
    print(f"  mean shifted by {shift:.2f} -> KL {float(kl_divergence(vk)):8.1f}")
