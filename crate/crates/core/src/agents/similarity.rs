use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector is empty")]
    Empty,
    #[error("vector has a non-finite component")]
    NonFinite,
}

/// Sentence embedding with at least one finite component.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self, SimilarityError> {
        if components.is_empty() {
            return Err(SimilarityError::Empty);
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self(components))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SimilarityError> {
    if a.dimension() != b.dimension() {
        return Err(SimilarityError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
