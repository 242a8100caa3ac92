"""filterlex utility modules"""
