from knowledge.tissue_knowledge import BACKGROUND, CSF, GM, WM, TissueKnowledgeBase, tissue_knowledge
