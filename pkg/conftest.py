import os
import sys

# top-level modules live next to this file
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
