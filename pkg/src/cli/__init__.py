# CLI package