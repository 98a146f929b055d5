# Overlap: cross-camera view-overlap recognition
