class ExportError(Exception):
    """Anything that stops an export before or during file writes."""
