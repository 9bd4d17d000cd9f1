//! Online prediction from a trained fusion model and a scene cache.
//!
//! The serving path only reads cached vectors; [`Predictor::predict_bypass`]
//! recomputes them with the frozen language model and exists for debugging
//! and equivalence checks.

use crate::error::{LarrError, Result};
use crate::fusion::{prepare, to_example, Example, FusionModel, SceneSource};
use crate::scenecache::{scene_keys, EmbeddingCache, Extractor, R};
use crate::synthworld::{Context, InteractionRecord, PoiId, UserId, World};

/// A request for one `(user, POI)` pair under a context.
pub fn request(user: UserId, poi: PoiId, context: Context) -> InteractionRecord {
    InteractionRecord {
        time: 0,
        user_id: user,
        poi_id: poi,
        context,
        click: 0,
        order: 0,
    }
}

pub struct Predictor<'a> {
    world: &'a World,
    cache: Option<&'a EmbeddingCache>,
    model: &'a FusionModel,
}

impl<'a> Predictor<'a> {
    /// Pairs a model with the cache it was trained against; a semantic model
    /// refuses a cache from a different text model.
    pub fn new(world: &'a World, cache: Option<&'a EmbeddingCache>, model: &'a FusionModel) -> Result<Self> {
        match (model.is_semantic(), cache) {
            (true, Some(c)) => model.check_cache(c)?,
            (true, None) => return Err(LarrError::InvalidConfig("semantic model needs its scene cache".into())),
            (false, _) => {}
        }
        Ok(Self { world, cache, model })
    }

    fn check_ids(&self, r: &InteractionRecord) -> Result<()> {
        if r.user_id.0 as usize >= self.world.users.len() || r.poi_id.0 as usize >= self.world.pois.len() {
            return Err(LarrError::InvalidConfig(format!(
                "unknown user {} or POI {}",
                r.user_id.0, r.poi_id.0
            )));
        }
        Ok(())
    }

    fn example(&self, r: &InteractionRecord) -> Result<Example> {
        self.check_ids(r)?;
        let cache = if self.model.is_semantic() { self.cache } else { None };
        if self.model.config.fallback {
            Ok(to_example(self.world, cache, r))
        } else {
            Ok(prepare(self.world, cache, std::slice::from_ref(r))?.remove(0))
        }
    }

    /// `(p_ctr, p_ctcvr)` from cached scene vectors.
    pub fn predict(&self, r: &InteractionRecord) -> Result<(f64, f64)> {
        Ok(self.predict_many(std::slice::from_ref(r))?[0])
    }

    pub fn predict_many(&self, records: &[InteractionRecord]) -> Result<Vec<(f64, f64)>> {
        let batch = records.iter().map(|r| self.example(r)).collect::<Result<Vec<_>>>()?;
        let source = match self.cache {
            Some(c) => SceneSource::Cache(c),
            None => SceneSource::Direct(&[]),
        };
        self.model.predict_batch(&batch, &source)
    }

    /// The same prediction with every scene vector recomputed by `extractor`
    /// instead of read from the cache.
    pub fn predict_bypass(&self, extractor: &Extractor, r: &InteractionRecord) -> Result<(f64, f64)> {
        self.check_ids(r)?;
        let ex = to_example(self.world, None, r);
        if !self.model.is_semantic() {
            return Ok(self.model.predict_batch(&[ex], &SceneSource::Direct(&[]))?[0]);
        }
        let keys = scene_keys(self.world, r);
        let fresh = extractor.extract(&keys, R)?;
        let row: [Option<Vec<f64>>; R] = std::array::from_fn(|j| Some(fresh[j].clone()));
        let rows = [row];
        Ok(self.model.predict_batch(&[ex], &SceneSource::Direct(&rows))?[0])
    }
}
