"""Command handlers behind the ramp-kit CLI verbs."""
