//! File layout under the output root.
//!
//! ```text
//! datasets/index.json, datasets/<file>/<day_class>.json
//! ingest_summary.json
//! clusters/assignment.json, clusters/assignment.centroids.csv, clusters/elbow.json, clusters/inertia.csv
//! <cluster>/<day_class>/checkpoint, train_log.jsonl, split.json, skipped.json
//! impute/<cluster>/<day_class>/mr_<rate>/rep_<n>.csv, impute/metrics.csv, impute/by_missing_rate.*
//! impute/one_shot.csv, impute/one_shot.json
//! evaluate/by_<group>.csv, evaluate/by_<group>.json
//! report/*.svg, report/summary.md
//! ```

use std::path::{Path, PathBuf};

use gasfgan::DayClass;

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn dataset_index(&self) -> PathBuf {
        self.datasets().join("index.json")
    }

    pub fn dataset(&self, file_stem: &str, class: DayClass) -> PathBuf {
        self.datasets()
            .join(file_stem)
            .join(format!("{class}.json"))
    }

    pub fn ingest_summary(&self) -> PathBuf {
        self.root.join("ingest_summary.json")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn assignment(&self) -> PathBuf {
        self.clusters().join("assignment.json")
    }

    pub fn elbow(&self) -> PathBuf {
        self.clusters().join("elbow.json")
    }

    pub fn inertia_csv(&self) -> PathBuf {
        self.clusters().join("inertia.csv")
    }

    pub fn model_dir(&self, cluster: usize, class: DayClass) -> PathBuf {
        self.root.join(cluster.to_string()).join(class.as_str())
    }

    pub fn checkpoint(&self, cluster: usize, class: DayClass) -> PathBuf {
        self.model_dir(cluster, class).join("checkpoint")
    }

    pub fn train_log(&self, cluster: usize, class: DayClass) -> PathBuf {
        self.model_dir(cluster, class).join("train_log.jsonl")
    }

    pub fn split(&self, cluster: usize, class: DayClass) -> PathBuf {
        self.model_dir(cluster, class).join("split.json")
    }

    pub fn skipped(&self, cluster: usize, class: DayClass) -> PathBuf {
        self.model_dir(cluster, class).join("skipped.json")
    }

    pub fn impute(&self) -> PathBuf {
        self.root.join("impute")
    }

    pub fn sweep_results(&self, cluster: usize, class: DayClass, mr: f64, rep: usize) -> PathBuf {
        self.impute()
            .join(cluster.to_string())
            .join(class.as_str())
            .join(format!("mr_{mr:.4}"))
            .join(format!("rep_{rep:02}.csv"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.impute().join("metrics.csv")
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// File-system-safe stem for a sensor id.
pub fn sensor_stem(sensor_id: &str) -> String {
    sensor_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn exists(p: &Path) -> bool {
    p.try_exists().unwrap_or(false)
}
