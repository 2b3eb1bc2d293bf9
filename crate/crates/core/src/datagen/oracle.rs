//! Attribute source that answers from the generator's ground-truth tables.

use super::{Category, GroupedDataset};
use crate::attributes::AttributeOrigin;
use crate::error::{Error, Result};
use crate::sap::{AttributeSource, Query, Question};

#[derive(Debug, Clone)]
pub struct OracleSource {
    categories: Vec<Category>,
}

pub fn oracle_attribute_source(dataset: &GroupedDataset) -> OracleSource {
    OracleSource {
        categories: dataset.categories.clone(),
    }
}

impl OracleSource {
    pub fn new(categories: Vec<Category>) -> Self {
        Self { categories }
    }
}

fn bullets(items: &[String], round: usize) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| match round % 3 {
            0 => format!("- {t}"),
            1 => format!("* {t}"),
            _ => format!("{}. {t}", i + 1),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl AttributeSource for OracleSource {
    fn origin(&self) -> AttributeOrigin {
        AttributeOrigin::Oracle
    }

    fn ask(&mut self, q: &Query<'_>) -> Result<String> {
        let cat = self
            .categories
            .iter()
            .find(|c| c.name == q.category)
            .ok_or_else(|| Error::input(format!("oracle has no category '{}'", q.category)))?;
        Ok(match q.question {
            Question::Q1 => {
                let all: Vec<String> = cat.core.iter().chain(&cat.spurious).cloned().collect();
                bullets(&all, q.round)
            }
            Question::Q2 => q
                .items
                .iter()
                .map(|i| format!("- {i}: {}", if cat.core.contains(i) { "yes" } else { "no" }))
                .collect::<Vec<_>>()
                .join("\n"),
            Question::Q3 => bullets(&cat.core, q.round),
        })
    }
}
