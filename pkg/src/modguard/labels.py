"""Label vocabularies: verdict labels and the 81-way classifier layout."""

from enum import Enum


class Label(str, Enum):
    SAFE = "SAFE"
    NSFW = "NSFW"


# index 0..79 follow the COCO-80 category order, index 80 is the NSFW class
COCO_LABELS = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train",
    "truck", "boat", "traffic light", "fire hydrant", "stop sign",
    "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag",
    "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon",
    "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot",
    "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)
MULTI_LABEL_CLASSES = COCO_LABELS + ("nsfw",)
MULTI_LABEL_NSFW_INDEX = 80
BINARY_CLASSES = ("sfw", "nsfw")
BINARY_NSFW_INDEX = 1

assert len(COCO_LABELS) == 80
