"""Synthetic grounded data: scenes, prompts, masks, file formats."""
from .dataset import (
    GroundedTriplet,
    detect_split_overlap,
    generate_dataset,
    generate_triplet,
    load_dataset,
    make_region_triplet,
    stack_images,
    stack_token_ids,
    write_dataset,
)
from .scenes import (
    BoxAnnotation,
    SceneSpec,
    box_to_mask,
    filter_boxes,
    generate_scene,
    make_prompt,
    parse_phrase,
    render,
    resolve,
)
from .vocab import default_vocab, detokenize, load_vocab, tokenize
