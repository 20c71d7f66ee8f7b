"""
Preparing images for the two models
===================================

The detector wants a 300x300 letterboxed square and the classifier a
224x224 anti-aliased stretch. This walks through both and shows how a box
found on the letterboxed input maps back to the original picture.
"""

import numpy as np

from modguard.imageops import ImageTensor, crop, resize_antialias, resize_letterbox

# A wide 200x500 test card: a bright band across the middle.
data = np.full((200, 500, 3), 0.1)
data[80:120] = 0.9
img = ImageTensor(data)

# Letterboxing keeps the aspect ratio and pads with mid gray.
boxed, tf = resize_letterbox(img, 300)
print("scale", tf.scale, "content", (tf.content_width, tf.content_height),
      "pad", (tf.pad_left, tf.pad_top))
print("top padding value", boxed.data[0, 0, 0])

# A box in detector coordinates comes back to the source frame.
det_box = (0.2, 0.45, 0.6, 0.55)
print("source box", np.round(tf.to_source(*det_box), 4))

# The classifier input is a plain square resize with area averaging.
small = resize_antialias(img, 224)
print("classifier input", small.shape, "band mean", small.data[100, :, 0].mean().round(3))

# Person crops get a margin relative to the box size, clamped to the image.
patch = crop(img, tf.to_source(*det_box), margin=0.1)
print("crop", patch.shape)
