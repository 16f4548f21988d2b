"""nsfactory: a desk-scale stereo training-data factory.

Fits compact radiance fields to posed multi-view images, renders perfectly
rectified stereo triplets with disparity and an ambient-occlusion confidence
map, and provides the full self-supervised loss stack plus evaluation tools
for disparity estimation built on such data.
"""

__version__ = "0.1.0"
