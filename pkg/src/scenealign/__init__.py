"""scenealign: desk-scale core of a metric human/scene joint reconstruction stack.

Submodules:
    tensorio   portable tensor containers, detection logs, sequence bundles
    geometry   pinhole camera model and intrinsics recovery from pointmaps
    roe        exact robust scale / scale-shift solvers
    body       miniature parametric body model and z-buffer visibility
    autodiff   tape-based reverse-mode engine and AdamW
    losses     the three training-stage objectives and their building blocks
    alignnet   the scale/translation fusion head
    training   synthetic oracle world and coarse/fine training loops
    curation   detection-log clip filtering pipeline
    metrics    world-grounded motion metrics and depth metrics
    pipeline   end-to-end reconstruction and PLY export
    cli        unified command-line entry point
"""

__version__ = "0.1.0"
