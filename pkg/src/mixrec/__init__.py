"""Temporal multi-interest candidate retrieval engine.

Pipeline: load a time-chunked bipartite engagement graph, co-embed users and
items, cluster items into interests, build the t=0 count artifact, run
per-chunk collapsed Gibbs inference over latent engagement interests, and
retrieve top-M candidates from the fitted count tables. Includes static
mixture / ANN-cosine / popularity baselines, ranking metrics, a synthetic
generator with known truth, and a rolling backtest harness.
"""

__version__ = "0.1.0"
