"""Feature files, vocabulary and caption datasets."""
