"""Party-side protocol work."""
