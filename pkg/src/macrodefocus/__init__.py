"""Self-supervised joint defocus deblurring and splat-based 3D reconstruction
for desk-scale macro scenes.

Subpackages: tensorgrad (autodiff + Adam), imaging (containers, metrics,
PNG/PFM), optics (thin-lens circle of confusion), clarity (focus-region
masks), svblur (spatially varying Gaussian blur), blurnet (variance
prediction networks), splatscene (differentiable splat renderer), pipeline
(dataset synthesis + staged training), cli (command-line entry).
"""

__version__ = "0.1.0"
