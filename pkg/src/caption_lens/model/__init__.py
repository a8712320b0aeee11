"""Global enhanced encoder, global adaptive decoder and the captioning model."""
