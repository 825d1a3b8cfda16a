//! Labelling sessions: region mosaic, class palette, labelled points and the
//! fitted classifier, persisted as one JSON file per session.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use dpix_core::downstream::{knn_fit, knn_predict, KnnModel};
use dpix_core::embstore::{fetch_region, pca_rgb, EmbeddingStore, Image, Mosaic};
use dpix_core::geo::BBox;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ApiError;

pub const DEFAULT_K: usize = 5;
pub const OVERLAY_ALPHA: u8 = 160;
const PALETTE: [&str; 8] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#ffff33", "#a65628", "#f781bf",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: usize,
    pub name: String,
    /// `#rrggbb`.
    pub color: String,
}

impl ClassDef {
    pub fn rgb(&self) -> Result<[u8; 3], ApiError> {
        parse_color(&self.color)
    }
}

fn parse_color(s: &str) -> Result<[u8; 3], ApiError> {
    let hex = s.strip_prefix('#').filter(|h| h.len() == 6 && h.is_ascii());
    let bad = || ApiError::BadRequest(format!("colour {s:?} is not #rrggbb"));
    let hex = hex.ok_or_else(bad)?;
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| bad());
    Ok([byte(0)?, byte(2)?, byte(4)?])
}

pub fn default_classes() -> Vec<ClassDef> {
    PALETTE
        .iter()
        .enumerate()
        .map(|(id, c)| ClassDef {
            id,
            name: format!("class {id}"),
            color: (*c).to_owned(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSession {
    pub id: Uuid,
    pub bbox: BBox,
    pub year: u16,
    pub classes: Vec<ClassDef>,
    pub points: Vec<LabelPoint>,
    /// Neighbour count of the fitted classifier, if any.
    pub k: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct CreateSession {
    pub bbox: BBox,
    pub year: u16,
    pub classes: Option<Vec<ClassDef>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: Uuid,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, Deserialize)]
pub struct LabelRequest {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCount {
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
pub struct TrainRequest {
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub trained: bool,
    pub n_points: usize,
}

struct Entry {
    session: LabelSession,
    mosaic: Arc<Mosaic>,
    knn: Option<KnnModel>,
    pca: Option<Arc<Vec<u8>>>,
}

impl Entry {
    fn class(&self, id: usize) -> Option<&ClassDef> {
        self.session.classes.iter().find(|c| c.id == id)
    }

    /// Embeddings and classes of labelled points that fall on valid pixels.
    fn training_set(&self) -> (Array2<f64>, Vec<usize>) {
        let dim = self.mosaic.map.dim();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for p in &self.session.points {
            if let Some((r, c)) = self.mosaic.locate(p.x, p.y) {
                if self.mosaic.map.valid[[r, c]] {
                    rows.extend(self.mosaic.map.data.slice(ndarray::s![r, c, ..]).iter());
                    labels.push(p.class);
                }
            }
        }
        (
            Array2::from_shape_vec((labels.len(), dim), rows).expect("whole rows"),
            labels,
        )
    }

    fn fit(&self, k: usize) -> Result<KnnModel, ApiError> {
        let (x, y) = self.training_set();
        let distinct: BTreeSet<usize> = y.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(ApiError::Conflict(
                "need labelled points from at least 2 classes".into(),
            ));
        }
        if k == 0 || k > y.len() {
            return Err(ApiError::Conflict(format!(
                "k = {k} but only {} labelled points",
                y.len()
            )));
        }
        knn_fit(x, y, k).map_err(ApiError::from)
    }
}

/// Session registry backed by a directory of JSON files. Every session has
/// its own lock, so requests on different sessions proceed in parallel.
pub struct MapService {
    store: EmbeddingStore,
    sessions_dir: PathBuf,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<Entry>>>>,
}

impl MapService {
    pub fn new(store_root: &Path, sessions_dir: &Path) -> Result<Self, ApiError> {
        fs::create_dir_all(sessions_dir).map_err(|e| ApiError::Internal(format!("{}: {e}", sessions_dir.display())))?;
        Ok(Self {
            store: EmbeddingStore::open(store_root),
            sessions_dir: sessions_dir.to_path_buf(),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn session_path(&self, id: Uuid) -> PathBuf {
        self.sessions_dir.join(format!("{id}.json"))
    }

    fn persist(&self, s: &LabelSession) -> Result<(), ApiError> {
        let path = self.session_path(s.id);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_vec_pretty(s).map_err(|e| ApiError::Internal(e.to_string()))?;
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
    }

    fn entry(&self, id: Uuid) -> Result<Arc<Mutex<Entry>>, ApiError> {
        if let Some(e) = self.sessions.read().expect("registry lock").get(&id) {
            return Ok(Arc::clone(e));
        }
        let path = self.session_path(id);
        let text = fs::read_to_string(&path).map_err(|_| ApiError::NotFound(format!("no session {id}")))?;
        let session: LabelSession = serde_json::from_str(&text).map_err(|e| ApiError::Internal(e.to_string()))?;
        let mosaic = Arc::new(fetch_region(&self.store, &session.bbox, session.year)?);
        let mut entry = Entry {
            session,
            mosaic,
            knn: None,
            pca: None,
        };
        if let Some(k) = entry.session.k {
            entry.knn = Some(entry.fit(k)?);
        }
        let mut reg = self.sessions.write().expect("registry lock");
        Ok(Arc::clone(reg.entry(id).or_insert_with(|| Arc::new(Mutex::new(entry)))))
    }

    fn with_entry<T>(&self, id: Uuid, f: impl FnOnce(&mut Entry) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let e = self.entry(id)?;
        let mut guard = e
            .lock()
            .map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        f(&mut guard)
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionCreated, ApiError> {
        req.bbox.validate()?;
        let classes = req.classes.unwrap_or_else(default_classes);
        let ids: BTreeSet<usize> = classes.iter().map(|c| c.id).collect();
        if classes.is_empty() || ids.len() != classes.len() {
            return Err(ApiError::BadRequest("classes must be non-empty with unique ids".into()));
        }
        for c in &classes {
            c.rgb()?;
        }
        let mosaic = Arc::new(fetch_region(&self.store, &req.bbox, req.year)?);
        let session = LabelSession {
            id: Uuid::new_v4(),
            bbox: req.bbox,
            year: req.year,
            classes,
            points: Vec::new(),
            k: None,
        };
        self.persist(&session)?;
        let out = SessionCreated {
            session_id: session.id,
            width: mosaic.window.width,
            height: mosaic.window.height,
        };
        let entry = Entry {
            session,
            mosaic,
            knn: None,
            pca: None,
        };
        self.sessions
            .write()
            .expect("registry lock")
            .insert(out.session_id, Arc::new(Mutex::new(entry)));
        Ok(out)
    }

    pub fn session(&self, id: Uuid) -> Result<LabelSession, ApiError> {
        self.with_entry(id, |e| Ok(e.session.clone()))
    }

    pub fn pca_png(&self, id: Uuid) -> Result<Arc<Vec<u8>>, ApiError> {
        self.with_entry(id, |e| {
            if e.pca.is_none() {
                e.pca = Some(Arc::new(pca_rgb(&e.mosaic.map)?.to_png()?));
            }
            Ok(Arc::clone(e.pca.as_ref().expect("just set")))
        })
    }

    pub fn add_label(&self, id: Uuid, req: LabelRequest) -> Result<LabelCount, ApiError> {
        self.with_entry(id, |e| {
            if e.mosaic.locate(req.x, req.y).is_none() {
                return Err(ApiError::Unprocessable(format!(
                    "({}, {}) is outside the session region",
                    req.x, req.y
                )));
            }
            if e.class(req.class).is_none() {
                return Err(ApiError::Unprocessable(format!("unknown class {}", req.class)));
            }
            e.session.points.push(LabelPoint {
                x: req.x,
                y: req.y,
                class: req.class,
            });
            self.persist(&e.session)?;
            Ok(LabelCount {
                count: e.session.points.len(),
            })
        })
    }

    /// Refits the classifier from scratch on the current labels.
    pub fn train(&self, id: Uuid, req: TrainRequest) -> Result<TrainResponse, ApiError> {
        self.with_entry(id, |e| {
            let k = req.k.unwrap_or(DEFAULT_K);
            let model = e.fit(k)?;
            let n_points = model.len();
            e.knn = Some(model);
            e.session.k = Some(k);
            self.persist(&e.session)?;
            Ok(TrainResponse {
                trained: true,
                n_points,
            })
        })
    }

    /// Class-coloured overlay of the region; no-data pixels are transparent.
    pub fn prediction(&self, id: Uuid) -> Result<Image, ApiError> {
        self.with_entry(id, |e| {
            let knn = e
                .knn
                .as_ref()
                .ok_or_else(|| ApiError::Conflict("session has no trained classifier".into()))?;
            let map = &e.mosaic.map;
            let (h, w) = (map.height(), map.width());
            let rows = map
                .data
                .to_shape((h * w, map.dim()))
                .map_err(|err| ApiError::Internal(err.to_string()))?
                .to_owned();
            let preds = knn_predict(knn, &rows)?;
            let colors: HashMap<usize, [u8; 3]> = e
                .session
                .classes
                .iter()
                .map(|c| c.rgb().map(|rgb| (c.id, rgb)))
                .collect::<Result<_, _>>()?;
            let mut data = vec![0u8; h * w * 4];
            for (i, (&class, &valid)) in preds.iter().zip(map.valid.iter()).enumerate() {
                if valid {
                    data[i * 4..i * 4 + 3].copy_from_slice(&colors[&class]);
                    data[i * 4 + 3] = OVERLAY_ALPHA;
                }
            }
            Ok(Image {
                width: w,
                height: h,
                channels: 4,
                data,
            })
        })
    }

    pub fn prediction_png(&self, id: Uuid) -> Result<Vec<u8>, ApiError> {
        Ok(self.prediction(id)?.to_png()?)
    }
}
