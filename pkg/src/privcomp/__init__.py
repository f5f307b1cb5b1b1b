"""Private computation of linear functions over replicated, non-colluding servers."""
