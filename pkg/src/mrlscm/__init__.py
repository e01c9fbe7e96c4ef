"""Localized statistical channel modeling from measurement reports.

Modules:
    channel_model    beam-gain measurement matrix y = A x
    synth_data       synthetic scenarios, MR datasets, CSV I/O
    hgnn_loc         hypergraph neural network localization
    sparse_recovery  greedy nonnegative sparse APS estimators
    grid_builder     joint grid construction and baseline grids
    evaluation       metrics, pipeline and sweeps
"""

__version__ = "0.1.0"
