//! Static batch routing of inference requests onto service endpoints.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{InferenceRequest, RoutingPolicy};

/// A request as the router sees it: an id and its estimated input tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteRequest {
    pub id: String,
    pub tokens: u64,
}

impl RouteRequest {
    pub fn new(id: impl Into<String>, tokens: u64) -> Self {
        Self {
            id: id.into(),
            tokens,
        }
    }
}

impl From<&InferenceRequest> for RouteRequest {
    fn from(r: &InferenceRequest) -> Self {
        RouteRequest::new(r.id.clone(), r.prompt_tokens)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointLoad {
    pub count: u64,
    pub tokens: u64,
}

/// Endpoint id -> ordered request ids, in endpoint registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingAssignment {
    pub requests: IndexMap<String, Vec<String>>,
    pub totals: IndexMap<String, EndpointLoad>,
}

impl RoutingAssignment {
    fn empty(endpoints: &[String]) -> Self {
        let mut a = Self::default();
        for e in endpoints {
            a.requests.insert(e.clone(), Vec::new());
            a.totals.insert(e.clone(), EndpointLoad::default());
        }
        a
    }

    fn assign(&mut self, endpoint: usize, request: &RouteRequest) {
        self.requests[endpoint].push(request.id.clone());
        let t = &mut self.totals[endpoint];
        t.count += 1;
        t.tokens += request.tokens;
    }

    pub fn endpoint_of(&self, request_id: &str) -> Option<&str> {
        self.requests
            .iter()
            .find(|(_, ids)| ids.iter().any(|r| r == request_id))
            .map(|(e, _)| e.as_str())
    }

    pub fn assigned(&self) -> u64 {
        self.totals.values().map(|t| t.count).sum()
    }

    pub fn max_tokens(&self) -> u64 {
        self.totals.values().map(|t| t.tokens).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("no endpoints to route to")]
    NoEndpoints,
    #[error("request {0} carries no token estimate")]
    MissingTokenEstimate(String),
}

/// Each request independently uniform over endpoints; reproducible per seed.
pub fn route_random(
    requests: &[RouteRequest],
    endpoints: &[String],
    seed: u64,
) -> Result<RoutingAssignment, RouteError> {
    if endpoints.is_empty() {
        return Err(RouteError::NoEndpoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = RoutingAssignment::empty(endpoints);
    for r in requests {
        a.assign(rng.gen_range(0..endpoints.len()), r);
    }
    Ok(a)
}

/// Request `i` goes to endpoint `i mod N`.
pub fn route_round_robin(
    requests: &[RouteRequest],
    endpoints: &[String],
) -> Result<RoutingAssignment, RouteError> {
    if endpoints.is_empty() {
        return Err(RouteError::NoEndpoints);
    }
    let mut a = RoutingAssignment::empty(endpoints);
    for (i, r) in requests.iter().enumerate() {
        a.assign(i % endpoints.len(), r);
    }
    Ok(a)
}

/// Longest-processing-time greedy on token volume.
///
/// Requests are taken by tokens descending (ties: id ascending) and each goes
/// to the endpoint with the least accumulated tokens, then least count, then
/// earliest registration.
pub fn route_token_balanced(
    requests: &[RouteRequest],
    endpoints: &[String],
) -> Result<RoutingAssignment, RouteError> {
    route_token_balanced_from(requests, endpoints, &[])
}

/// [`route_token_balanced`] starting from existing per-endpoint loads
/// (missing entries count as empty), so successive batches stay balanced.
pub fn route_token_balanced_from(
    requests: &[RouteRequest],
    endpoints: &[String],
    baseline: &[EndpointLoad],
) -> Result<RoutingAssignment, RouteError> {
    if endpoints.is_empty() {
        return Err(RouteError::NoEndpoints);
    }
    if let Some(r) = requests.iter().find(|r| r.tokens == 0) {
        return Err(RouteError::MissingTokenEstimate(r.id.clone()));
    }
    let mut order: Vec<&RouteRequest> = requests.iter().collect();
    order.sort_by(|a, b| b.tokens.cmp(&a.tokens).then_with(|| a.id.cmp(&b.id)));

    let mut loads: Vec<EndpointLoad> = (0..endpoints.len())
        .map(|i| baseline.get(i).copied().unwrap_or_default())
        .collect();
    let mut a = RoutingAssignment::empty(endpoints);
    for r in order {
        let target = (0..loads.len())
            .min_by_key(|&i| (loads[i].tokens, loads[i].count, i))
            .expect("non-empty endpoints");
        loads[target].tokens += r.tokens;
        loads[target].count += 1;
        a.assign(target, r);
    }
    Ok(a)
}

pub fn route(
    policy: RoutingPolicy,
    requests: &[RouteRequest],
    endpoints: &[String],
    seed: u64,
) -> Result<RoutingAssignment, RouteError> {
    match policy {
        RoutingPolicy::Random => route_random(requests, endpoints, seed),
        RoutingPolicy::RoundRobin => route_round_robin(requests, endpoints),
        RoutingPolicy::TokenBalanced => route_token_balanced(requests, endpoints),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imbalance {
    pub count_cv: f64,
    pub token_cv: f64,
    pub max_over_mean_tokens: f64,
}

/// Coefficient of variation (population) of counts and tokens, and max/mean
/// token load. Zero-mean or single-endpoint cases report cv 0 and ratio 1.
pub fn imbalance(assignment: &RoutingAssignment) -> Imbalance {
    let counts: Vec<f64> = assignment.totals.values().map(|t| t.count as f64).collect();
    let tokens: Vec<f64> = assignment.totals.values().map(|t| t.tokens as f64).collect();
    let token_mean = mean(&tokens);
    let max = tokens.iter().copied().fold(0.0, f64::max);
    Imbalance {
        count_cv: cv(&counts),
        token_cv: cv(&tokens),
        max_over_mean_tokens: if token_mean > 0.0 { max / token_mean } else { 1.0 },
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn cv(xs: &[f64]) -> f64 {
    let m = mean(xs);
    if xs.len() < 2 || m <= 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    var.sqrt() / m
}
