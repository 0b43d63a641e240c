# Synthetic articulated-figure renderer
