"""
Rare-event estimation for tail probabilities of sums of i.i.d. Weibull variables: crude Monte Carlo,
conditional Monte Carlo, marginal importance sampling and empirical-likelihood estimators that pool
Gibbs samples from several densities.
"""
