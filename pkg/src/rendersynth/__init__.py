"""Differentiable synthetic data for circular barcode tags.

Modules:
    tag_model     renderer, cell masks and the reference decoder
    diff_ops      augmentation stages with hand-written backward passes
    pyramid_aug   handmade augmentations built on noise pyramids
    real_aug      augmentations for stand-in real images
    adversarial   generator, discriminator and the training loop
    evaluation    mean Hamming distance, reference decoder, preservation sweeps
    datasets      seeded dataset generation
    storage       image files, manifests and config files
    gradcheck     finite-difference checks
    cli           command-line entry point
"""
__version__ = "0.1.0"
