"""XDomainMix feature augmentation for domain generalization."""
