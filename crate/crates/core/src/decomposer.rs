//! CTE sketching and hierarchical clause decomposition.
//!
//! A query is first rewritten so that every uncorrelated derived table in a
//! FROM clause becomes a named WITH binding (`CTE_1`, `CTE_2`, ...) and nested
//! WITH clauses are flattened into one top-level list. The sketch is then
//! split into one [`ClauseBundle`] per binding plus a final bundle for the
//! outermost SELECT. [`recompose`] re-seats the bundle strings into SQL.
//!
//! Clause strings that have no dedicated list are folded into the nearest
//! one: the FROM relation leads the JOIN list (`"FROM T AS X"`, further comma
//! items as `", U"`), HAVING is kept whole in the WHERE list as
//! `"HAVING <expr>"`, and SELECT DISTINCT puts a bare `"DISTINCT"` first in the
//! SELECT list. OFFSET is carried next to LIMIT.

use std::collections::HashSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::helpers::attached_token::AttachedToken;
use sqlparser::ast::{
    BinaryOperator, Cte, Distinct, Expr, GroupByExpr, Ident, LimitClause, ObjectName, OrderByKind,
    Query, Select, SelectFlavor, SetExpr, TableAlias, TableFactor, TableWithJoins, VisitMut,
    VisitorMut, With,
};

use crate::sql::{normalize_text, parse_query, SqlError};

/// Per-subquery clause lists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseBundle {
    #[serde(rename = "SELECTs/CALCs", default)]
    pub selects_calcs: Vec<String>,
    #[serde(rename = "JOINs", default)]
    pub joins: Vec<String>,
    #[serde(rename = "WHEREs", default)]
    pub wheres: Vec<String>,
    #[serde(rename = "GROUP_BYs", default)]
    pub group_bys: Vec<String>,
    #[serde(rename = "ORDERs", default)]
    pub orders: Vec<String>,
    #[serde(rename = "LIMITs", default)]
    pub limits: Vec<String>,
    /// Set when the bundle merges the branches of a set operation; such a
    /// bundle can be inspected but not re-seated into a single SELECT.
    #[serde(
        rename = "merged_set_operation",
        default,
        skip_serializing_if = "std::ops::Not::not"
    )]
    pub merged: bool,
}

impl ClauseBundle {
    /// All clause strings in list order.
    pub fn clauses(&self) -> impl Iterator<Item = &str> {
        self.selects_calcs
            .iter()
            .chain(&self.joins)
            .chain(&self.wheres)
            .chain(&self.group_bys)
            .chain(&self.orders)
            .chain(&self.limits)
            .map(String::as_str)
    }

    fn lists_mut(&mut self) -> [&mut Vec<String>; 6] {
        [
            &mut self.selects_calcs,
            &mut self.joins,
            &mut self.wheres,
            &mut self.group_bys,
            &mut self.orders,
            &mut self.limits,
        ]
    }

    fn dedup(&mut self) {
        for list in self.lists_mut() {
            let mut seen = HashSet::new();
            list.retain(|s| seen.insert(s.clone()));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedBundle {
    pub name: String,
    pub bundle: ClauseBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySketch {
    pub ctes: Vec<NamedBundle>,
    #[serde(rename = "final")]
    pub final_bundle: ClauseBundle,
    pub source_sql: String,
}

impl QuerySketch {
    pub fn cte_names(&self) -> impl Iterator<Item = &str> {
        self.ctes.iter().map(|c| c.name.as_str())
    }
}

/// Rewrite `sql` into its CTE-based sketch.
pub fn reformat_to_cte(sql: &str) -> Result<String, SqlError> {
    let mut query = parse_query(sql)?;
    let original = normalize_text(&query.to_string());
    if query.with.as_ref().is_some_and(|w| w.recursive) {
        return Ok(original);
    }

    let mut hoister = Hoister::new(&query, &original);
    if let Some(with) = query.with.take() {
        for mut cte in with.cte_tables {
            hoister.hoist_query(&mut cte.query)?;
            hoister.out.push(cte);
        }
    }
    hoister.hoist_query(&mut query)?;
    if !hoister.out.is_empty() {
        query.with = Some(With {
            with_token: AttachedToken::empty(),
            recursive: false,
            cte_tables: hoister.out,
        });
    }
    Ok(normalize_text(&query.to_string()))
}

struct Hoister {
    taken: HashSet<String>,
    next_cte: usize,
    original: String,
    out: Vec<Cte>,
}

impl Hoister {
    fn new(query: &Query, original: &str) -> Self {
        let mut taken: HashSet<String> = relation_names(query).into_iter().collect();
        if let Some(with) = &query.with {
            taken.extend(with.cte_tables.iter().map(|c| ident_key(&c.alias.name)));
        }
        Hoister {
            taken,
            next_cte: 1,
            original: original.to_string(),
            out: Vec::new(),
        }
    }

    fn next_cte_name(&mut self) -> String {
        loop {
            let name = format!("CTE_{}", self.next_cte);
            self.next_cte += 1;
            if self.taken.insert(name.clone()) {
                return name;
            }
        }
    }

    fn rename_nested(&mut self, old: &str) -> String {
        (1..)
            .map(|n| format!("{old}_{n}"))
            .find(|candidate| self.taken.insert(candidate.clone()))
            .unwrap()
    }

    fn alias_is_referenced(&self, alias: &str) -> bool {
        let needle = format!("{alias}.");
        let bytes = self.original.as_bytes();
        self.original.match_indices(&needle).any(|(i, _)| {
            i == 0 || {
                let prev = bytes[i - 1];
                !(prev.is_ascii_alphanumeric() || prev == b'_')
            }
        })
    }

    fn hoist_query(&mut self, query: &mut Query) -> Result<(), SqlError> {
        if let Some(with) = query.with.take() {
            if with.recursive {
                query.with = Some(with);
                return Ok(());
            }
            let mut renames: Vec<(String, String)> = Vec::new();
            for mut cte in with.cte_tables {
                apply_renames(&mut cte.query, &renames);
                self.hoist_query(&mut cte.query)?;
                let old = ident_key(&cte.alias.name);
                let new = self.rename_nested(&old);
                cte.alias.name = Ident::new(new.clone());
                renames.push((old, new));
                self.out.push(cte);
            }
            apply_renames(query, &renames);
        }
        self.hoist_set_expr(&mut query.body)
    }

    fn hoist_set_expr(&mut self, body: &mut SetExpr) -> Result<(), SqlError> {
        match body {
            SetExpr::Select(select) => {
                for twj in &mut select.from {
                    self.hoist_table_with_joins(twj)?;
                }
                Ok(())
            }
            SetExpr::SetOperation { left, right, .. } => {
                self.hoist_set_expr(left)?;
                self.hoist_set_expr(right)
            }
            SetExpr::Query(q) => self.hoist_query(q),
            _ => Ok(()),
        }
    }

    fn hoist_table_with_joins(&mut self, twj: &mut TableWithJoins) -> Result<(), SqlError> {
        self.hoist_factor(&mut twj.relation)?;
        for join in &mut twj.joins {
            self.hoist_factor(&mut join.relation)?;
        }
        Ok(())
    }

    fn hoist_factor(&mut self, factor: &mut TableFactor) -> Result<(), SqlError> {
        match factor {
            TableFactor::Derived {
                lateral: false,
                sample: None,
                ..
            } => {}
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => return self.hoist_table_with_joins(table_with_joins),
            _ => return Ok(()),
        }
        let TableFactor::Derived {
            subquery, alias, ..
        } = std::mem::replace(factor, table_factor("_", None))
        else {
            unreachable!()
        };
        let mut body = *subquery;
        self.hoist_query(&mut body)?;
        let name = self.next_cte_name();
        self.out.push(Cte {
            alias: table_alias(&name, false),
            query: Box::new(body),
            from: None,
            materialized: None,
            closing_paren_token: AttachedToken::empty(),
        });
        let alias = alias.filter(|a| {
            !a.columns.is_empty() || a.at.is_some() || self.alias_is_referenced(&ident_key(&a.name))
        });
        *factor = table_factor(&name, alias);
        Ok(())
    }
}

fn ident_key(ident: &Ident) -> String {
    normalize_text(&ident.to_string())
}

fn object_key(name: &ObjectName) -> String {
    normalize_text(&name.to_string())
}

fn table_alias(name: &str, explicit: bool) -> TableAlias {
    TableAlias {
        explicit,
        name: Ident::new(name),
        columns: Vec::new(),
        at: None,
    }
}

fn table_factor(name: &str, alias: Option<TableAlias>) -> TableFactor {
    TableFactor::Table {
        name: ObjectName::from(vec![Ident::new(name)]),
        alias,
        args: None,
        with_hints: Vec::new(),
        version: None,
        with_ordinality: false,
        partitions: Vec::new(),
        json_path: None,
        sample: None,
        index_hints: Vec::new(),
    }
}

struct Renamer<'a> {
    renames: &'a [(String, String)],
}

impl VisitorMut for Renamer<'_> {
    type Break = ();

    fn pre_visit_table_factor(&mut self, factor: &mut TableFactor) -> ControlFlow<()> {
        if let TableFactor::Table { name, alias, .. } = factor {
            let key = object_key(name);
            if let Some((old, new)) = self.renames.iter().rev().find(|(old, _)| *old == key) {
                *name = ObjectName::from(vec![Ident::new(new.as_str())]);
                if alias.is_none() {
                    *alias = Some(table_alias(old, true));
                }
            }
        }
        ControlFlow::Continue(())
    }
}

fn apply_renames(query: &mut Query, renames: &[(String, String)]) {
    if renames.is_empty() {
        return;
    }
    let _ = query.visit(&mut Renamer { renames });
}

/// Every relation name referenced anywhere in the query, normalized.
fn relation_names(query: &Query) -> Vec<String> {
    let mut names = Vec::new();
    let _ = sqlparser::ast::visit_relations(query, |name| {
        let key = object_key(name);
        if !names.contains(&key) {
            names.push(key);
        }
        ControlFlow::<()>::Continue(())
    });
    names
}

/// Base tables referenced by `sql`, excluding names bound by its WITH list.
pub fn referenced_tables(sql: &str) -> Result<Vec<String>, SqlError> {
    let query = parse_query(sql)?;
    let bound: HashSet<String> = query
        .with
        .iter()
        .flat_map(|w| &w.cte_tables)
        .map(|c| ident_key(&c.alias.name))
        .collect();
    Ok(relation_names(&query)
        .into_iter()
        .filter(|n| !bound.contains(n))
        .collect())
}

/// Relations read by each WITH binding and by the outer body, in binding
/// order. CTE names count as relations here.
pub fn relations_per_binding(sql: &str) -> Result<(Vec<(String, Vec<String>)>, Vec<String>), SqlError> {
    let mut query = parse_query(&reformat_to_cte(sql)?)?;
    let ctes = query
        .with
        .take()
        .map(|w| {
            w.cte_tables
                .iter()
                .map(|c| (ident_key(&c.alias.name), relation_names(&c.query)))
                .collect()
        })
        .unwrap_or_default();
    Ok((ctes, relation_names(&query)))
}

/// Decompose a query into its CTE bundles and final bundle.
///
/// The input is passed through [`reformat_to_cte`] first (idempotent on
/// already-sketched SQL), so `source_sql` is always the CTE form.
pub fn decompose(sql: &str) -> Result<QuerySketch, SqlError> {
    let source_sql = reformat_to_cte(sql)?;
    let mut query = parse_query(&source_sql)?;
    let mut ctes = Vec::new();
    if let Some(with) = query.with.take() {
        if with.recursive {
            return Err(SqlError::UnsupportedStatement("WITH RECURSIVE".into()));
        }
        for cte in &with.cte_tables {
            if !cte.alias.columns.is_empty() {
                return Err(SqlError::UnsupportedStatement(
                    "CTE column lists".into(),
                ));
            }
            if cte.materialized.is_some() || cte.from.is_some() {
                return Err(SqlError::UnsupportedStatement(
                    "CTE materialization hints".into(),
                ));
            }
            ctes.push(NamedBundle {
                name: ident_key(&cte.alias.name),
                bundle: bundle_of(&cte.query)?,
            });
        }
    }
    let final_bundle = bundle_of(&query)?;
    Ok(QuerySketch {
        ctes,
        final_bundle,
        source_sql,
    })
}

fn render(node: &impl std::fmt::Display) -> String {
    normalize_text(&node.to_string())
}

fn unsupported(what: &str) -> SqlError {
    SqlError::UnsupportedStatement(what.to_string())
}

fn bundle_of(query: &Query) -> Result<ClauseBundle, SqlError> {
    let mut bundle = ClauseBundle::default();
    collect_query(query, &mut bundle)?;
    bundle.dedup();
    Ok(bundle)
}

fn collect_query(query: &Query, bundle: &mut ClauseBundle) -> Result<(), SqlError> {
    if query.with.is_some() {
        return Err(unsupported("nested WITH"));
    }
    if query.fetch.is_some()
        || !query.locks.is_empty()
        || query.for_clause.is_some()
        || query.settings.is_some()
        || query.format_clause.is_some()
        || !query.pipe_operators.is_empty()
    {
        return Err(unsupported("query modifiers beyond ORDER BY/LIMIT"));
    }
    collect_set_expr(&query.body, bundle)?;
    if let Some(order_by) = &query.order_by {
        if order_by.interpolate.is_some() {
            return Err(unsupported("ORDER BY INTERPOLATE"));
        }
        match &order_by.kind {
            OrderByKind::Expressions(exprs) => {
                bundle.orders.extend(exprs.iter().map(render));
            }
            OrderByKind::All(_) => return Err(unsupported("ORDER BY ALL")),
        }
    }
    match &query.limit_clause {
        None => {}
        Some(LimitClause::LimitOffset {
            limit,
            offset,
            limit_by,
        }) => {
            if !limit_by.is_empty() {
                return Err(unsupported("LIMIT BY"));
            }
            if let Some(limit) = limit {
                bundle.limits.push(format!("LIMIT {}", render(limit)));
            }
            if let Some(offset) = offset {
                bundle.limits.push(render(offset));
            }
        }
        Some(LimitClause::OffsetCommaLimit { offset, limit }) => {
            bundle.limits.push(format!("LIMIT {}", render(limit)));
            bundle.limits.push(format!("OFFSET {}", render(offset)));
        }
    }
    Ok(())
}

fn collect_set_expr(body: &SetExpr, bundle: &mut ClauseBundle) -> Result<(), SqlError> {
    match body {
        SetExpr::Select(select) => collect_select(select, bundle),
        SetExpr::SetOperation { left, right, .. } => {
            bundle.merged = true;
            collect_set_expr(left, bundle)?;
            collect_set_expr(right, bundle)
        }
        SetExpr::Query(inner) => {
            bundle.merged = true;
            collect_query(inner, bundle)
        }
        other => Err(SqlError::UnsupportedStatement(format!(
            "query body {}",
            render(other).split_whitespace().next().unwrap_or_default()
        ))),
    }
}

fn collect_select(select: &Select, bundle: &mut ClauseBundle) -> Result<(), SqlError> {
    if select.top.is_some()
        || select.into.is_some()
        || select.exclude.is_some()
        || !select.lateral_views.is_empty()
        || select.prewhere.is_some()
        || !select.connect_by.is_empty()
        || !select.cluster_by.is_empty()
        || !select.distribute_by.is_empty()
        || !select.sort_by.is_empty()
        || !select.named_window.is_empty()
        || select.qualify.is_some()
        || select.value_table_mode.is_some()
        || select.flavor != SelectFlavor::Standard
    {
        return Err(unsupported("SELECT clause outside the decomposable subset"));
    }
    match &select.distinct {
        None | Some(Distinct::All) => {}
        Some(Distinct::Distinct) => bundle.selects_calcs.push("DISTINCT".into()),
        Some(_) => return Err(unsupported("DISTINCT ON")),
    }
    bundle
        .selects_calcs
        .extend(select.projection.iter().map(render));

    for (i, twj) in select.from.iter().enumerate() {
        let lead = if i == 0 { "FROM " } else { ", " };
        bundle.joins.push(format!("{lead}{}", render(&twj.relation)));
        bundle.joins.extend(twj.joins.iter().map(render));
    }

    if let Some(selection) = &select.selection {
        let mut conjuncts = Vec::new();
        split_conjuncts(selection, &mut conjuncts);
        bundle.wheres.extend(conjuncts.into_iter().map(render));
    }

    match &select.group_by {
        GroupByExpr::Expressions(exprs, modifiers) if modifiers.is_empty() => {
            bundle.group_bys.extend(exprs.iter().map(render));
        }
        _ => return Err(unsupported("GROUP BY modifiers")),
    }
    if let Some(having) = &select.having {
        bundle.wheres.push(format!("HAVING {}", render(having)));
    }
    Ok(())
}

fn split_conjuncts<'a>(expr: &'a Expr, out: &mut Vec<&'a Expr>) {
    match expr {
        Expr::BinaryOp {
            left,
            op: BinaryOperator::And,
            right,
        } => {
            split_conjuncts(left, out);
            split_conjuncts(right, out);
        }
        other => out.push(other),
    }
}

fn irrecomposable(msg: impl Into<String>) -> SqlError {
    SqlError::IrrecomposableSketch(msg.into())
}

fn bundle_to_sql(label: &str, bundle: &ClauseBundle) -> Result<String, SqlError> {
    if bundle.merged {
        return Err(irrecomposable(format!(
            "{label}: merged set-operation branches cannot be re-seated"
        )));
    }
    let mut selects = bundle.selects_calcs.as_slice();
    let mut sql = String::from("SELECT");
    if selects.first().map(String::as_str) == Some("DISTINCT") {
        sql.push_str(" DISTINCT");
        selects = &selects[1..];
    }
    if selects.is_empty() {
        return Err(irrecomposable(format!("{label}: no SELECT expressions")));
    }
    sql.push(' ');
    sql.push_str(&selects.join(", "));

    for (i, join) in bundle.joins.iter().enumerate() {
        if i == 0 && !join.starts_with("FROM ") {
            return Err(irrecomposable(format!(
                "{label}: first JOIN entry must carry the FROM relation, got `{join}`"
            )));
        }
        if i > 0 && join.starts_with("FROM ") {
            return Err(irrecomposable(format!(
                "{label}: FROM relation `{join}` out of position"
            )));
        }
        if !join.starts_with(',') {
            sql.push(' ');
        }
        sql.push_str(join);
    }

    let (havings, wheres): (Vec<&String>, Vec<&String>) =
        bundle.wheres.iter().partition(|w| w.starts_with("HAVING "));
    if !wheres.is_empty() {
        sql.push_str(" WHERE ");
        sql.push_str(
            &wheres
                .iter()
                .map(|w| w.as_str())
                .collect::<Vec<_>>()
                .join(" AND "),
        );
    }
    if !bundle.group_bys.is_empty() {
        sql.push_str(" GROUP BY ");
        sql.push_str(&bundle.group_bys.join(", "));
    }
    match havings.as_slice() {
        [] => {}
        [one] => {
            sql.push(' ');
            sql.push_str(one);
        }
        many => {
            let parts: Vec<String> = many
                .iter()
                .map(|h| format!("({})", &h["HAVING ".len()..]))
                .collect();
            sql.push_str(" HAVING ");
            sql.push_str(&parts.join(" AND "));
        }
    }
    if !bundle.orders.is_empty() {
        sql.push_str(" ORDER BY ");
        sql.push_str(&bundle.orders.join(", "));
    }
    let mut seen_limit = false;
    for limit in &bundle.limits {
        if limit.starts_with("LIMIT ") && !seen_limit {
            seen_limit = true;
        } else if !limit.starts_with("OFFSET ") {
            return Err(irrecomposable(format!(
                "{label}: `{limit}` is not a LIMIT/OFFSET clause"
            )));
        }
        sql.push(' ');
        sql.push_str(limit);
    }
    Ok(sql)
}

/// Rebuild executable SQL from a sketch.
pub fn recompose(sketch: &QuerySketch) -> Result<String, SqlError> {
    let mut sql = String::new();
    for (i, cte) in sketch.ctes.iter().enumerate() {
        sql.push_str(if i == 0 { "WITH " } else { ", " });
        let body = bundle_to_sql(&cte.name, &cte.bundle)?;
        sql.push_str(&format!("{} AS ({body})", cte.name));
    }
    if !sql.is_empty() {
        sql.push(' ');
    }
    sql.push_str(&bundle_to_sql("final", &sketch.final_bundle)?);
    let query = parse_query(&sql).map_err(|e| irrecomposable(e.to_string()))?;
    Ok(normalize_text(&query.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hoists_derived_table_and_drops_unused_alias() {
        let out = reformat_to_cte("SELECT a FROM (SELECT a FROM t) x").unwrap();
        assert_eq!(out, "WITH CTE_1 AS (SELECT A FROM T) SELECT A FROM CTE_1");
    }

    #[test]
    fn keeps_alias_that_is_referenced() {
        let out = reformat_to_cte("SELECT x.a FROM (SELECT a FROM t) x").unwrap();
        assert_eq!(
            out,
            "WITH CTE_1 AS (SELECT A FROM T) SELECT X.A FROM CTE_1 X"
        );
    }

    #[test]
    fn select_one_is_only_normalized() {
        assert_eq!(reformat_to_cte("select 1;").unwrap(), "SELECT 1");
    }

    #[test]
    fn inner_derived_tables_are_hoisted_first() {
        let out =
            reformat_to_cte("SELECT * FROM (SELECT b FROM (SELECT b FROM u) i) o JOIN v ON 1 = 1")
                .unwrap();
        assert_eq!(
            out,
            "WITH CTE_1 AS (SELECT B FROM U), CTE_2 AS (SELECT B FROM CTE_1) \
             SELECT * FROM CTE_2 JOIN V ON 1 = 1"
        );
    }

    #[test]
    fn generated_names_skip_existing_bindings() {
        let out = reformat_to_cte(
            "WITH CTE_1 AS (SELECT 1 AS A) SELECT * FROM CTE_1, (SELECT 2 AS B) d",
        )
        .unwrap();
        assert_eq!(
            out,
            "WITH CTE_1 AS (SELECT 1 AS A), CTE_2 AS (SELECT 2 AS B) SELECT * FROM CTE_1, CTE_2"
        );
    }

    #[test]
    fn nested_with_is_flattened_with_renamed_binding() {
        let out = reformat_to_cte(
            "WITH outer_c AS (WITH inner_c AS (SELECT a FROM t) SELECT a FROM inner_c) SELECT a FROM outer_c",
        )
        .unwrap();
        assert_eq!(
            out,
            "WITH INNER_C_1 AS (SELECT A FROM T), OUTER_C AS (SELECT A FROM INNER_C_1 AS INNER_C) \
             SELECT A FROM OUTER_C"
        );
    }

    #[test]
    fn scalar_and_lateral_subqueries_stay_in_place() {
        let sql = "SELECT A, (SELECT MAX(B) FROM U WHERE U.A = T.A) AS M FROM T WHERE A IN (SELECT A FROM (SELECT A FROM W) Z)";
        assert_eq!(reformat_to_cte(sql).unwrap(), sql);
    }

    #[test]
    fn reformat_rejects_bad_input() {
        assert!(matches!(reformat_to_cte("SELEC 1"), Err(SqlError::Parse(_))));
        assert!(matches!(
            reformat_to_cte("INSERT INTO t VALUES (1)"),
            Err(SqlError::UnsupportedStatement(_))
        ));
    }

    #[test]
    fn decompose_select_one() {
        let sketch = decompose("SELECT 1").unwrap();
        assert!(sketch.ctes.is_empty());
        assert_eq!(sketch.final_bundle.selects_calcs, vec!["1"]);
        assert!(sketch.final_bundle.joins.is_empty());
        assert!(sketch.final_bundle.wheres.is_empty());
        assert!(sketch.final_bundle.limits.is_empty());
        assert_eq!(recompose(&sketch).unwrap(), "SELECT 1");
    }

    #[test]
    fn decompose_group_by_and_limit() {
        let sketch =
            decompose("WITH C AS (SELECT A FROM T GROUP BY A) SELECT A FROM C LIMIT 3").unwrap();
        assert_eq!(sketch.ctes[0].name, "C");
        assert_eq!(sketch.ctes[0].bundle.group_bys, vec!["A"]);
        assert_eq!(sketch.ctes[0].bundle.joins, vec!["FROM T"]);
        assert_eq!(sketch.final_bundle.limits, vec!["LIMIT 3"]);
    }

    #[test]
    fn where_conjuncts_split_but_disjunctions_kept_whole() {
        let sketch =
            decompose("SELECT a FROM t WHERE a = 1 AND (b = 2 OR c = 3) AND d > 0").unwrap();
        assert_eq!(
            sketch.final_bundle.wheres,
            vec!["A = 1", "(B = 2 OR C = 3)", "D > 0"]
        );
    }

    #[test]
    fn folded_clauses_round_trip() {
        let sql = "SELECT DISTINCT a, COUNT(*) AS n FROM t AS x, u LEFT JOIN v ON u.k = v.k \
                   WHERE x.a > 1 GROUP BY a HAVING COUNT(*) > 1 ORDER BY a DESC LIMIT 3 OFFSET 1";
        let sketch = decompose(sql).unwrap();
        let b = &sketch.final_bundle;
        assert_eq!(b.selects_calcs[0], "DISTINCT");
        assert_eq!(b.joins, vec!["FROM T AS X", ", U", "LEFT JOIN V ON U.K = V.K"]);
        assert_eq!(b.wheres, vec!["X.A > 1", "HAVING COUNT(*) > 1"]);
        assert_eq!(b.limits, vec!["LIMIT 3", "OFFSET 1"]);
        let back = recompose(&sketch).unwrap();
        assert_eq!(back, sketch.source_sql);
        assert_eq!(decompose(&back).unwrap(), sketch);
    }

    #[test]
    fn set_operations_merge_and_refuse_recomposition() {
        let sketch = decompose("SELECT a FROM t UNION ALL SELECT b FROM u").unwrap();
        assert!(sketch.final_bundle.merged);
        assert_eq!(sketch.final_bundle.selects_calcs, vec!["A", "B"]);
        assert_eq!(sketch.final_bundle.joins, vec!["FROM T", "FROM U"]);
        assert!(matches!(
            recompose(&sketch),
            Err(SqlError::IrrecomposableSketch(_))
        ));
    }

    #[test]
    fn recompose_rejects_misplaced_strings() {
        let mut sketch = decompose("SELECT a FROM t LIMIT 2").unwrap();
        sketch.final_bundle.limits = vec!["ORDER BY A".into()];
        assert!(matches!(
            recompose(&sketch),
            Err(SqlError::IrrecomposableSketch(_))
        ));
        let mut sketch = decompose("SELECT a FROM t").unwrap();
        sketch.final_bundle.joins = vec!["JOIN U ON 1 = 1".into()];
        assert!(matches!(
            recompose(&sketch),
            Err(SqlError::IrrecomposableSketch(_))
        ));
        sketch.final_bundle.joins = vec!["FROM T WHERE".into()];
        assert!(matches!(
            recompose(&sketch),
            Err(SqlError::IrrecomposableSketch(_))
        ));
    }

    #[test]
    fn referenced_tables_excludes_ctes() {
        let t = referenced_tables("WITH c AS (SELECT * FROM a JOIN b ON 1=1) SELECT * FROM c, a")
            .unwrap();
        assert_eq!(t, vec!["A", "B"]);
    }

    mod props {
        use super::*;
        use crate::db::Database;
        use crate::sample_data::sports_database;
        use proptest::prelude::*;
        use std::sync::OnceLock;

        const TABLES: [(&str, &str, [&str; 2]); 2] = [
            ("SPORTS_FINANCIALS", "FIN_MONTH", ["REVENUE", "COST"]),
            ("SPORTS_VIEWERSHIP", "VIEW_MONTH", ["VIEWER_HOURS", "VIEWER_HOURS"]),
        ];
        const AGGS: [&str; 4] = ["SUM", "AVG", "MAX", "MIN"];
        const COUNTRIES: [&str; 3] = ["CANADA", "MEXICO", "UNITED STATES"];

        /// Two-binding query from a small grammar.
        fn two_cte_query() -> impl Strategy<Value = String> {
            (
                (0usize..2, 0usize..2, 0usize..4, proptest::option::of(0usize..3), any::<bool>(), any::<bool>()),
                (any::<bool>(), proptest::option::of(1u32..500), any::<bool>()),
                (any::<bool>(), any::<bool>(), proptest::option::of(1u32..8), proptest::option::of(1u32..4)),
            )
                .prop_map(|((t, m, a, country, since, having), (window, min_m, scaled), (distinct, filter_rn, limit, rn_max))| {
                    let (table, month, metrics) = TABLES[t];
                    let metric = metrics[m];
                    let agg = AGGS[a];
                    let mut first = format!(
                        "SELECT COUNTRY, SPORT_CATEGORY, {agg}({metric}) AS M FROM {table}"
                    );
                    let mut conds = Vec::new();
                    if let Some(c) = country {
                        conds.push(format!("COUNTRY = '{}'", COUNTRIES[c]));
                    }
                    if since {
                        conds.push(format!("{month} >= '2022-01-01'"));
                    }
                    if !conds.is_empty() {
                        first.push_str(&format!(" WHERE {}", conds.join(" AND ")));
                    }
                    first.push_str(" GROUP BY COUNTRY, SPORT_CATEGORY");
                    if having {
                        first.push_str(" HAVING COUNT(*) > 1");
                    }
                    let mut second = String::from("SELECT COUNTRY, SPORT_CATEGORY, M");
                    if scaled {
                        second.push_str(", M * 2 AS M2");
                    }
                    if window {
                        second.push_str(", ROW_NUMBER() OVER (PARTITION BY COUNTRY ORDER BY M DESC, SPORT_CATEGORY) AS RN");
                    }
                    second.push_str(" FROM A");
                    if let Some(k) = min_m {
                        second.push_str(&format!(" WHERE M > {k}"));
                    }
                    let mut last = format!("SELECT {}COUNTRY, SPORT_CATEGORY", if distinct { "DISTINCT " } else { "" });
                    if window {
                        last.push_str(", RN");
                        if filter_rn {
                            last.push_str(&format!(" FROM B WHERE RN <= {}", rn_max.unwrap_or(3)));
                        } else {
                            last.push_str(" FROM B");
                        }
                    } else {
                        last.push_str(" FROM B");
                    }
                    last.push_str(" ORDER BY COUNTRY, SPORT_CATEGORY");
                    if let Some(n) = limit {
                        last.push_str(&format!(" LIMIT {n}"));
                    }
                    format!("WITH A AS ({first}), B AS ({second}) {last}")
                })
        }

        fn all_strings(sketch: &QuerySketch) -> Vec<String> {
            sketch
                .ctes
                .iter()
                .map(|c| &c.bundle)
                .chain(std::iter::once(&sketch.final_bundle))
                .flat_map(|b| b.clauses().map(str::to_string).collect::<Vec<_>>())
                .collect()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]
            #[test]
            fn random_two_cte_sketches_round_trip(sql in two_cte_query()) {
                static DB: OnceLock<Database> = OnceLock::new();
                let db = DB.get_or_init(|| sports_database().unwrap());
                let cte = reformat_to_cte(&sql).unwrap();
                prop_assert_eq!(reformat_to_cte(&cte).unwrap(), cte.clone());
                let sketch = decompose(&cte).unwrap();
                prop_assert_eq!(sketch.ctes.len(), 2);
                prop_assert_eq!(sketch.cte_names().collect::<Vec<_>>(), vec!["A", "B"]);
                for s in all_strings(&sketch) {
                    prop_assert!(!s.is_empty());
                    prop_assert!(cte.contains(&s), "{} not in {}", s, cte);
                }
                for b in sketch.ctes.iter().map(|c| &c.bundle).chain(std::iter::once(&sketch.final_bundle)) {
                    for list in [&b.selects_calcs, &b.joins, &b.wheres, &b.group_bys, &b.orders, &b.limits] {
                        let unique: HashSet<&String> = list.iter().collect();
                        prop_assert_eq!(unique.len(), list.len());
                    }
                }
                let back = recompose(&sketch).unwrap();
                let again = decompose(&back).unwrap();
                prop_assert_eq!(&again.ctes, &sketch.ctes);
                prop_assert_eq!(&again.final_bundle, &sketch.final_bundle);
                let expected = db.query(&sql, None).unwrap();
                let actual = db.query(&back, None).unwrap();
                prop_assert_eq!(expected.rows, actual.rows);
            }
        }
    }
}
