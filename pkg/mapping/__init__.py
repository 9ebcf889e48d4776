# Surfel map package
