use std::sync::Arc;

/// Counts model tokens in a text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> usize {
        count_tokens_approx(text)
    }
}

pub fn count_tokens_approx(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Input-token limit plus the counter used to enforce it.
#[derive(Clone)]
pub struct TokenBudget {
    limit: usize,
    counter: Arc<dyn TokenCounter>,
}

impl std::fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenBudget").field("limit", &self.limit).finish()
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self::approx(super::DEFAULT_TOKEN_BUDGET)
    }
}

impl TokenBudget {
    pub fn approx(limit: usize) -> Self {
        Self::with_counter(limit, Arc::new(ApproxTokenCounter))
    }

    pub fn with_counter(limit: usize, counter: Arc<dyn TokenCounter>) -> Self {
        Self { limit, counter }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    /// Same counter, different limit.
    pub fn with_limit(&self, limit: usize) -> Self {
        Self {
            limit,
            counter: self.counter.clone(),
        }
    }
}
