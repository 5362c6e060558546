"""Problem builders and runners for the image restoration and Huber studies."""
