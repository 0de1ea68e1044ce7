"""Desk-scale speaker diarization toolkit.

Submodules:
    tensor      dense tensors with reverse-mode autodiff
    nn          encoder / attractor decoder / embedding enhancer network
    training    labels, teacher-forced enrollments, losses, optimisation
    decoding    iterative enrollment decoding and spectral clustering
    simulation  mixture and conversation generators with synthetic features
    scoring     DER / JER / speaker counting / speech-type metrics
    io          RTTM, feature and checkpoint files, frame stacking
    cli         command-line pipeline (simulate / train / infer / score)
"""

__version__ = "0.1.0"
