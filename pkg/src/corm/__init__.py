'''Compound random measures.'''
