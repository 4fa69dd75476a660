use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ln, ModelAdapter};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

const ROW_TOLERANCE: f64 = 1e-9;

/// A table-driven toy model: explicit next-token distributions keyed by the
/// exact token-id context, with a default row for every other context.
/// Conditioning is ignored.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    name: String,
    vocab: Vocabulary,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    default: Vec<f64>,
}

/// On-disk scenario document; distributions are keyed by piece surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub rows: Vec<ScenarioRow>,
    /// Distribution for contexts absent from `rows`; all mass on EOS when omitted.
    #[serde(default)]
    pub default: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub context: Vec<TokenId>,
    pub dist: BTreeMap<String, f64>,
}

fn dense_row(vocab: &Vocabulary, sparse: &[(TokenId, f64)]) -> Result<Vec<f64>> {
    let mut row = vec![0.0; vocab.len()];
    if sparse.is_empty() {
        row[vocab.eos() as usize] = 1.0;
        return Ok(row);
    }
    for &(id, p) in sparse {
        vocab.check_id(id)?;
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::config(format!(
                "probability {p} for token {id} is invalid"
            )));
        }
        row[id as usize] += p;
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::config(format!(
            "distribution sums to {total}, not 1"
        )));
    }
    Ok(row)
}

/// A context and its sparse `(token, probability)` distribution.
pub type SparseRow = (Vec<TokenId>, Vec<(TokenId, f64)>);

impl ScenarioModel {
    /// Builds a model from sparse `(token, probability)` rows.
    pub fn from_probs(
        name: impl Into<String>,
        vocab: Vocabulary,
        rows: Vec<SparseRow>,
        default: Vec<(TokenId, f64)>,
    ) -> Result<Self> {
        let mut table = HashMap::with_capacity(rows.len());
        for (context, dist) in rows {
            for &id in &context {
                vocab.check_id(id)?;
            }
            let row = dense_row(&vocab, &dist)?;
            if table.insert(context.clone(), row).is_some() {
                return Err(Error::config(format!(
                    "duplicate scenario context {context:?}"
                )));
            }
        }
        let default = dense_row(&vocab, &default)?;
        Ok(Self {
            name: name.into(),
            vocab,
            rows: table,
            default,
        })
    }

    pub fn from_file_doc(name: impl Into<String>, file: ScenarioFile) -> Result<Self> {
        let vocab = file.vocabulary;
        let by_surface = |dist: &BTreeMap<String, f64>| -> Result<Vec<(TokenId, f64)>> {
            dist.iter()
                .map(|(surface, &p)| {
                    vocab.id_of(surface).map(|id| (id, p)).ok_or_else(|| {
                        Error::config(format!("unknown piece {surface:?} in scenario"))
                    })
                })
                .collect()
        };
        let rows = file
            .rows
            .iter()
            .map(|r| Ok((r.context.clone(), by_surface(&r.dist)?)))
            .collect::<Result<Vec<_>>>()?;
        let default = by_surface(&file.default)?;
        Self::from_probs(name, vocab.clone(), rows, default)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let doc: ScenarioFile = serde_json::from_str(&text)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Self::from_file_doc(name, doc)
    }

    /// Serializable form; zero-probability entries are omitted.
    pub fn to_file_doc(&self) -> ScenarioFile {
        let sparse = |row: &[f64]| -> BTreeMap<String, f64> {
            row.iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(id, &p)| (self.vocab.pieces()[id].surface.clone(), p))
                .collect()
        };
        let mut rows: Vec<ScenarioRow> = self
            .rows
            .iter()
            .map(|(context, row)| ScenarioRow {
                context: context.clone(),
                dist: sparse(row),
            })
            .collect();
        rows.sort_by(|a, b| a.context.cmp(&b.context));
        ScenarioFile {
            vocabulary: self.vocab.clone(),
            rows,
            default: sparse(&self.default),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Probabilities after `context`, indexed by token id.
    pub fn probs(&self, context: &[TokenId]) -> &[f64] {
        self.rows.get(context).unwrap_or(&self.default)
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
}

impl ModelAdapter for ScenarioModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, _conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.probs(prefix).iter().map(|&p| ln(p)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_sum_exp;

    const DOC: &str = r#"{
        "vocabulary": {"marker": null, "pieces": [
            {"surface": "a", "kind": "normal"},
            {"surface": "b", "kind": "normal"},
            {"surface": "</s>", "kind": "eos"}]},
        "rows": [
            {"context": [], "dist": {"a": 0.7, "b": 0.2, "</s>": 0.1}},
            {"context": [0], "dist": {"a": 0.5, "b": 0.3, "</s>": 0.2}}],
        "default": {"</s>": 1.0}
    }"#;

    #[test]
    fn parses_scenario_file() {
        let m = ScenarioModel::from_file_doc("t", serde_json::from_str(DOC).unwrap()).unwrap();
        assert_eq!(m.probs(&[]), &[0.7, 0.2, 0.1]);
        assert_eq!(m.probs(&[0]), &[0.5, 0.3, 0.2]);
        assert_eq!(m.probs(&[1, 1]), &[0.0, 0.0, 1.0]);
        for ctx in [&[][..], &[0], &[1]] {
            let lp = m.next_log_probs("", ctx).unwrap();
            assert!(log_sum_exp(&lp).abs() < 1e-9);
        }
    }

    #[test]
    fn file_round_trip() {
        let m = ScenarioModel::from_file_doc("t", serde_json::from_str(DOC).unwrap()).unwrap();
        let json = serde_json::to_string(&m.to_file_doc()).unwrap();
        let back = ScenarioModel::from_file_doc("t", serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.probs(&[]), m.probs(&[]));
        assert_eq!(back.probs(&[0]), m.probs(&[0]));
        assert_eq!(back.row_count(), 2);
    }

    #[test]
    fn rejects_bad_rows() {
        let vocab: Vocabulary = serde_json::from_str(
            r#"{"pieces":[{"surface":"a","kind":"normal"},{"surface":"</s>","kind":"eos"}]}"#,
        )
        .unwrap();
        let not_normalized =
            ScenarioModel::from_probs("x", vocab.clone(), vec![(vec![], vec![(0, 0.5)])], vec![]);
        assert!(not_normalized.is_err());
        let negative = ScenarioModel::from_probs(
            "x",
            vocab.clone(),
            vec![(vec![], vec![(0, 1.5), (1, -0.5)])],
            vec![],
        );
        assert!(negative.is_err());
        let bad_id = ScenarioModel::from_probs("x", vocab, vec![(vec![], vec![(9, 1.0)])], vec![]);
        assert!(bad_id.is_err());
    }
}
