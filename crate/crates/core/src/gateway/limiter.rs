use std::sync::{Condvar, Mutex};

use super::{GatewayError, GenerateParams, ImageInput, LikelihoodMode, LikelihoodRecord, LlmClient, VlmClient};

/// Counting semaphore bounding concurrent requests to one endpoint.
#[derive(Debug)]
pub struct InFlightLimiter {
    capacity: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit { limiter: self }
    }
}

/// Slot held for the duration of one request.
#[derive(Debug)]
pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self
            .limiter
            .in_flight
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Wraps any client with an in-flight bound.
pub struct Limited<C> {
    inner: C,
    limiter: InFlightLimiter,
}

impl<C> Limited<C> {
    pub fn new(inner: C, max_in_flight: usize) -> Self {
        Self {
            inner,
            limiter: InFlightLimiter::new(max_in_flight),
        }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: LlmClient> LlmClient for Limited<C> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn generate_text(&self, prompt: &str, params: &GenerateParams) -> Result<String, GatewayError> {
        let _permit = self.limiter.acquire();
        self.inner.generate_text(prompt, params)
    }
}

impl<C: VlmClient> VlmClient for Limited<C> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError> {
        let _permit = self.limiter.acquire();
        self.inner.query_likelihood(image, question, mode)
    }
}
