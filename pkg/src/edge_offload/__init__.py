"""Token-bucket-regulated offloading of classifier inputs to an edge server.

Modules: ``token_bucket`` (scaled bucket arithmetic), ``trace_gen``
(synthetic populations and input sequences), ``metric_map`` (entropy to
expected-reward regression), ``dqn`` (numpy Q-network and trainer),
``policies`` (threshold, MDP and DQN policies), ``sim_eval`` (simulator and
policy comparison), ``config``/``experiment``/``cli`` (pipeline plumbing).
"""

__version__ = "0.1.0"
