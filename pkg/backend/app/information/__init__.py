"""Token-entropy mutual information of responses under the reference model."""
