"""Treatment-regime estimation from irregularly-timed longitudinal data.

Pipeline: fit a continuous-time latent-state model (ct_hmm), transform
trajectories into belief-state MDP tuples (belief_transform), define a
policy class (regime), solve the V-learning estimating equations
(v_learning), and attach sandwich variances and projection confidence
intervals (inference). The simulation module generates the synthetic
scenarios used by the experiment scripts and the acceptance tests.
"""

__version__ = "0.1.0"
