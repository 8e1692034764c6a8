"""Text-prompted multi-contrast brain MR synthesis at desk scale."""
