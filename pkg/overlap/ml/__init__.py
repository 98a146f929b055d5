# Overlap Recognition Engine (features, vocabulary, geometry)
