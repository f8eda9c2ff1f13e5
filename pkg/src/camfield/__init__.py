"""Collaborative neural field engine for recovering failed camera views.

A desk-scale pipeline: an analytic multi-agent scene oracle provides ground
truth, a geometry BEV volume conditions a static background field and a
dynamic scene-flow foreground field, and a quadrature volume renderer
reconstructs the images of failed cameras from the views of the healthy ones.
"""

__version__ = "0.1.0"
