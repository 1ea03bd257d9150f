"""Multi-view driver activity classification.

Frozen vision-language image embeddings per camera view, a late-fusion
fully-connected classifier over the three views, sliding-window mode-filter
smoothing of the per-frame predictions, and a subject-wise k-fold evaluation
harness. See the README for the CLI workflow; the module layout mirrors the
pipeline stages:

    manifest   dataset ingestion, frame enumeration, fold partitions
    encoder    pretrained and synthetic embedding backends
    store      bit-exact on-disk embedding cache
    net        the late-fusion network (forward/backward/checkpoints)
    train      cross-entropy + Adam + 1cycle + early stopping
    filters    mode filter and segment utilities
    evaluate   protocols, confusion metrics, reports
    synthetic  desk-scale generated dataset
    pipeline   embedding pass and data assembly
    cli        command-line entry point
"""

__version__ = "0.1.0"
