use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::teacher::{FrozenTeacher, TeacherFeatures, TeacherKind};
use crate::tensor::Tensor;

/// Teacher targets keyed by a SHA-256 of everything that determines them.
#[derive(Debug, Default)]
pub struct TeacherCache {
    entries: BTreeMap<String, TeacherFeatures>,
}

impl TeacherCache {
    /// Digest of the teacher spec, student patch side and image content.
    /// File teachers are looked up by id, so the id is hashed for them too.
    pub fn key(teacher: &FrozenTeacher, id: &str, image: &Tensor, patch_side: usize) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(teacher.spec()).expect("spec serializes"));
        h.update((patch_side as u64).to_le_bytes());
        if teacher.spec().kind == TeacherKind::File {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for &d in image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in image.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Extracts every distinct image once, in parallel. Returns the cache
    /// and each image's key.
    pub fn build(
        teacher: &FrozenTeacher,
        images: &[(String, Tensor)],
        patch_side: usize,
    ) -> Result<(Self, Vec<String>)> {
        let keys: Vec<String> = images
            .par_iter()
            .map(|(id, img)| Self::key(teacher, id, img, patch_side))
            .collect();
        let mut first = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            first.entry(k.clone()).or_insert(i);
        }
        let entries = first
            .into_par_iter()
            .map(|(k, i)| {
                let (id, img) = &images[i];
                Ok((k, teacher.extract(id, img, patch_side)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok((Self { entries }, keys))
    }

    pub fn get(&self, key: &str) -> Option<&TeacherFeatures> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
