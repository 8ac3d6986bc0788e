//! Policy parsing and evaluation: the decision core of the PDP.
//!
//! Policies and attribute records arrive as JSON documents. Parsing is
//! strict: unknown comparison operators, operand type mismatches, and
//! malformed rule targets are rejected here so a bad policy fails loudly at
//! administration time rather than silently at decision time. Evaluation is
//! a pure function of the policy, the two attribute records, and an explicit
//! clock; replicated evaluators given the same inputs produce byte-identical
//! decisions.
//!
//! Rules combine by pure conjunction. A rule whose target attribute is
//! missing, whose value has the wrong type, or whose field reference cannot
//! be resolved evaluates to false: every failure mode folds into Deny.
//! Corollary, documented prominently: a policy with an empty rule set
//! permits everything (the empty conjunction is true). Authors wanting
//! deny-all must write an unsatisfiable rule.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use bigdecimal::BigDecimal;
use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

fn schema(msg: impl Into<String>) -> PolicyError {
    PolicyError::SchemaViolation(msg.into())
}

/// A typed attribute value. Exactly one variant is populated by
/// construction. Strings matching the ISO-8601 date grammar are stored as
/// [`AttributeValue::DateTime`] at parse time, so a `Text` value never looks
/// like a datetime when it came through the parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttributeValue {
    Bool(bool),
    /// Exact decimal semantics; never binary floating point, so replicated
    /// evaluation stays bit-identical.
    Numeric(BigDecimal),
    /// UTC, second resolution.
    DateTime(DateTime<Utc>),
    Text(String),
}

impl AttributeValue {
    fn matches_type(&self, ty: ComparisonType) -> bool {
        matches!(
            (self, ty),
            (AttributeValue::Bool(_), ComparisonType::Boolean)
                | (AttributeValue::Numeric(_), ComparisonType::Numeric)
                | (AttributeValue::DateTime(_), ComparisonType::Datetime)
                | (AttributeValue::Text(_), ComparisonType::String)
        )
    }

    /// Render back to the JSON form the parser accepts.
    pub fn to_json(&self) -> Value {
        match self {
            AttributeValue::Bool(b) => Value::Bool(*b),
            AttributeValue::Numeric(d) => number_from_decimal(d),
            AttributeValue::DateTime(t) => Value::String(format_datetime(t)),
            AttributeValue::Text(s) => Value::String(s.clone()),
        }
    }
}

fn number_from_decimal(d: &BigDecimal) -> Value {
    let text = d.to_string();
    let n = serde_json::Number::from_str(&text).expect("BigDecimal renders a valid JSON number");
    Value::Number(n)
}

/// Which entity a record (or rule side) describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Subject,
    Object,
}

impl EntityKind {
    pub fn id_field(self) -> &'static str {
        match self {
            EntityKind::Subject => "subjectID",
            EntityKind::Object => "resourceID",
        }
    }

    /// The qualified-name prefix rules use for this entity.
    pub fn rule_prefix(self) -> &'static str {
        match self {
            EntityKind::Subject => "user",
            EntityKind::Object => "resource",
        }
    }

    pub fn opposite(self) -> EntityKind {
        match self {
            EntityKind::Subject => EntityKind::Object,
            EntityKind::Object => EntityKind::Subject,
        }
    }
}

/// A keyed set of typed attributes for one subject or object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRecord {
    pub entity_id: String,
    pub kind: EntityKind,
    pub attributes: IndexMap<String, AttributeValue>,
}

impl AttributeRecord {
    pub fn new(entity_id: &str, kind: EntityKind) -> Self {
        Self {
            entity_id: entity_id.to_string(),
            kind,
            attributes: IndexMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: AttributeValue) -> Self {
        self.attributes.insert(name.to_string(), value);
        self
    }

    /// Render to the document form: `{"subjectID": ..., "attributes": {...}}`.
    pub fn to_json(&self) -> Value {
        let mut attrs = Map::new();
        for (name, value) in &self.attributes {
            attrs.insert(name.clone(), value.to_json());
        }
        let mut doc = Map::new();
        doc.insert(self.kind.id_field().to_string(), Value::String(self.entity_id.clone()));
        doc.insert("attributes".to_string(), Value::Object(attrs));
        Value::Object(doc)
    }
}

/// The value type a rule compares, naming the operator catalog it draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonType {
    Boolean,
    Datetime,
    Numeric,
    String,
}

impl ComparisonType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "boolean" => Some(Self::Boolean),
            "datetime" => Some(Self::Datetime),
            "numeric" => Some(Self::Numeric),
            "string" => Some(Self::String),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Boolean => "boolean",
            Self::Datetime => "datetime",
            Self::Numeric => "numeric",
            Self::String => "string",
        }
    }
}

/// Comparison operators. The catalog per type:
/// boolean `boolAnd`; numeric `isStrictlyEqual`/`isLessThan`/`isGreaterThan`;
/// datetime `isMoreRecentThan`/`isOlderThan`; string `isStrictlyEqual`.
/// `boolOr` is reserved and rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    BoolAnd,
    IsStrictlyEqual,
    IsLessThan,
    IsGreaterThan,
    IsMoreRecentThan,
    IsOlderThan,
}

impl Comparison {
    fn name(self) -> &'static str {
        match self {
            Self::BoolAnd => "boolAnd",
            Self::IsStrictlyEqual => "isStrictlyEqual",
            Self::IsLessThan => "isLessThan",
            Self::IsGreaterThan => "isGreaterThan",
            Self::IsMoreRecentThan => "isMoreRecentThan",
            Self::IsOlderThan => "isOlderThan",
        }
    }

    fn parse_for(ty: ComparisonType, s: &str) -> Result<Self, PolicyError> {
        let op = match (ty, s) {
            (ComparisonType::Boolean, "boolAnd") => Self::BoolAnd,
            (ComparisonType::Boolean, "boolOr") => {
                return Err(schema("comparison 'boolOr' is reserved and not accepted"))
            }
            (ComparisonType::Numeric, "isStrictlyEqual") => Self::IsStrictlyEqual,
            (ComparisonType::Numeric, "isLessThan") => Self::IsLessThan,
            (ComparisonType::Numeric, "isGreaterThan") => Self::IsGreaterThan,
            (ComparisonType::Datetime, "isMoreRecentThan") => Self::IsMoreRecentThan,
            (ComparisonType::Datetime, "isOlderThan") => Self::IsOlderThan,
            (ComparisonType::String, "isStrictlyEqual") => Self::IsStrictlyEqual,
            _ => {
                return Err(schema(format!(
                    "unknown comparison '{s}' for comparison_type '{}'",
                    ty.name()
                )))
            }
        };
        Ok(op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationUnit {
    Day,
    Hour,
    Minute,
}

/// A relative duration operand, e.g. `1DAY`. Grammar: `<integer><UNIT>`,
/// UNIT in {DAY, HOUR, MINUTE}, case-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationSpec {
    pub count: u32,
    pub unit: DurationUnit,
}

impl DurationSpec {
    pub fn parse(s: &str) -> Option<Self> {
        let upper = s.to_ascii_uppercase();
        let (count, unit) = if let Some(stripped) = upper.strip_suffix("MINUTE") {
            (stripped, DurationUnit::Minute)
        } else if let Some(stripped) = upper.strip_suffix("HOUR") {
            (stripped, DurationUnit::Hour)
        } else {
            (upper.strip_suffix("DAY")?, DurationUnit::Day)
        };
        if count.is_empty() || !count.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let count: u32 = count.parse().ok()?;
        Some(Self { count, unit })
    }

    pub fn to_chrono(self) -> chrono::Duration {
        match self.unit {
            DurationUnit::Day => chrono::Duration::days(i64::from(self.count)),
            DurationUnit::Hour => chrono::Duration::hours(i64::from(self.count)),
            DurationUnit::Minute => chrono::Duration::minutes(i64::from(self.count)),
        }
    }
}

impl fmt::Display for DurationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.unit {
            DurationUnit::Day => "DAY",
            DurationUnit::Hour => "HOUR",
            DurationUnit::Minute => "MINUTE",
        };
        write!(f, "{}{}", self.count, unit)
    }
}

/// What a rule compares its target against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Literal(AttributeValue),
    /// Applied as `clock + duration`; only valid with `isMoreRecentThan`.
    Duration(DurationSpec),
    /// An attribute on the opposite entity, e.g. `resource.libraryGroup`
    /// when the target is a `user.*` attribute.
    FieldRef(String),
}

/// A qualified attribute name: `user.<attr>` or `resource.<attr>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualifiedName {
    pub entity: EntityKind,
    pub attr: String,
}

impl QualifiedName {
    fn parse(s: &str) -> Result<Self, PolicyError> {
        let (prefix, attr) = s
            .split_once('.')
            .ok_or_else(|| schema(format!("'{s}' is not a qualified name (expected user.<attr> or resource.<attr>)")))?;
        let entity = match prefix {
            "user" => EntityKind::Subject,
            "resource" => EntityKind::Object,
            other => return Err(schema(format!("unknown entity prefix '{other}' in '{s}'"))),
        };
        if attr.is_empty() {
            return Err(schema(format!("empty attribute name in '{s}'")));
        }
        Ok(Self {
            entity,
            attr: attr.to_string(),
        })
    }

    pub fn to_string_qualified(&self) -> String {
        format!("{}.{}", self.entity.rule_prefix(), self.attr)
    }
}

/// One comparison over a target attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub target: QualifiedName,
    pub comparison_type: ComparisonType,
    pub comparison: Comparison,
    pub operand: Operand,
}

/// A policy: identifier, determinative attribute sets, and its rule map in
/// document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub policy_id: String,
    pub subject_attributes: BTreeSet<String>,
    pub object_attributes: BTreeSet<String>,
    pub rules: IndexMap<String, Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Permit,
    Deny,
}

/// The result of evaluating one policy against one subject/object pair.
/// `outcome` is `Permit` exactly when `failed_rules` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub failed_rules: Vec<String>,
}

/// Evaluation inputs that are not part of the policy or the records. The
/// clock is stamped in by the gateway before endorsement; the engine never
/// reads the system clock, so replicated evaluators agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluationContext {
    pub clock: DateTime<Utc>,
}

// ---------------------------------------------------------------------------
// Datetime handling
// ---------------------------------------------------------------------------

/// True when the string has the shape `YYYY-MM-DD` or `YYYY-MM-DDThh:mm:ssZ`.
/// Shape only; calendar validity is checked separately so a value like
/// `2020-13-45` is rejected instead of silently becoming text.
pub fn datetime_shape(s: &str) -> bool {
    fn digits(b: &[u8], at: usize, n: usize) -> bool {
        b[at..at + n].iter().all(u8::is_ascii_digit)
    }
    fn date_shape(b: &[u8]) -> bool {
        digits(b, 0, 4) && b[4] == b'-' && digits(b, 5, 2) && b[7] == b'-' && digits(b, 8, 2)
    }
    let b = s.as_bytes();
    match b.len() {
        10 => date_shape(b),
        20 => {
            date_shape(&b[..10])
                && b[10] == b'T'
                && digits(b, 11, 2)
                && b[13] == b':'
                && digits(b, 14, 2)
                && b[16] == b':'
                && digits(b, 17, 2)
                && b[19] == b'Z'
        }
        _ => false,
    }
}

/// Parse either accepted ISO-8601 form into a UTC timestamp. Date-only
/// values are midnight UTC.
pub fn parse_datetime(s: &str) -> Result<DateTime<Utc>, PolicyError> {
    if !datetime_shape(s) {
        return Err(schema(format!("'{s}' is not an ISO-8601 datetime")));
    }
    if s.len() == 10 {
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|_| schema(format!("'{s}' is not a valid calendar date")))?;
        Ok(Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap()))
    } else {
        let dt = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ")
            .map_err(|_| schema(format!("'{s}' is not a valid calendar datetime")))?;
        Ok(Utc.from_utc_datetime(&dt))
    }
}

/// Render a timestamp in the full accepted form, `YYYY-MM-DDThh:mm:ssZ`.
pub fn format_datetime(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn as_object<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>, PolicyError> {
    v.as_object()
        .ok_or_else(|| schema(format!("{what} must be a JSON object")))
}

fn parse_json(document: &str) -> Result<Value, PolicyError> {
    serde_json::from_str(document).map_err(|e| PolicyError::MalformedDocument(e.to_string()))
}

fn scalar_to_value(name: &str, v: &Value) -> Result<AttributeValue, PolicyError> {
    match v {
        Value::Bool(b) => Ok(AttributeValue::Bool(*b)),
        Value::Number(n) => {
            let d = BigDecimal::from_str(&n.to_string())
                .map_err(|_| schema(format!("attribute '{name}': unreadable number")))?;
            Ok(AttributeValue::Numeric(d))
        }
        Value::String(s) => {
            if datetime_shape(s) {
                Ok(AttributeValue::DateTime(parse_datetime(s)?))
            } else {
                Ok(AttributeValue::Text(s.clone()))
            }
        }
        _ => Err(schema(format!(
            "attribute '{name}' must be a scalar (boolean, number, or string)"
        ))),
    }
}

/// Parse a subject or resource attribute document.
pub fn parse_attributes(document: &str, kind: EntityKind) -> Result<AttributeRecord, PolicyError> {
    parse_attributes_value(&parse_json(document)?, kind)
}

/// Same as [`parse_attributes`] but over an already-parsed JSON value.
pub fn parse_attributes_value(doc: &Value, kind: EntityKind) -> Result<AttributeRecord, PolicyError> {
    let obj = as_object(doc, "attribute document")?;
    let id_field = kind.id_field();
    let entity_id = obj
        .get(id_field)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(format!("missing or non-string '{id_field}'")))?;
    if entity_id.is_empty() {
        return Err(schema(format!("'{id_field}' must be non-empty")));
    }
    // The original worked example capitalizes "Attributes" on the resource
    // document; accept both spellings.
    let attrs = obj
        .get("attributes")
        .or_else(|| obj.get("Attributes"))
        .ok_or_else(|| schema("missing 'attributes' object"))?;
    let attrs = as_object(attrs, "'attributes'")?;

    let mut record = AttributeRecord::new(entity_id, kind);
    for (name, value) in attrs {
        if name.is_empty() {
            return Err(schema("attribute names must be non-empty"));
        }
        record
            .attributes
            .insert(name.clone(), scalar_to_value(name, value)?);
    }
    Ok(record)
}

fn parse_attr_name_set(map: Option<&Value>, side: &str) -> Result<BTreeSet<String>, PolicyError> {
    let mut set = BTreeSet::new();
    let Some(v) = map else { return Ok(set) };
    let obj = as_object(v, &format!("'attributes.{side}'"))?;
    for (name, value) in obj {
        if name.is_empty() {
            return Err(schema(format!("empty attribute name under 'attributes.{side}'")));
        }
        // Values here are descriptive placeholders; only require scalars.
        if !matches!(value, Value::Bool(_) | Value::Number(_) | Value::String(_) | Value::Null) {
            return Err(schema(format!(
                "'attributes.{side}.{name}' must be a scalar placeholder"
            )));
        }
        set.insert(name.clone());
    }
    Ok(set)
}

fn parse_rule(key: &str, body: &Value) -> Result<Rule, PolicyError> {
    let target = QualifiedName::parse(key)?;
    let obj = as_object(body, &format!("rule '{key}'"))?;

    let mut comparison_type = None;
    let mut comparison = None;
    let mut value = None;
    let mut field = None;
    for (k, v) in obj {
        match k.as_str() {
            "comparison_type" => comparison_type = Some(v),
            "comparison" => comparison = Some(v),
            "value" => value = Some(v),
            "field" => field = Some(v),
            // Appears alongside `field` in the original worked example but is
            // never defined; `field` is authoritative.
            "comparison_target" => {}
            other => {
                return Err(schema(format!("rule '{key}': unknown field '{other}'")));
            }
        }
    }

    let ty_str = comparison_type
        .and_then(Value::as_str)
        .ok_or_else(|| schema(format!("rule '{key}': missing or non-string 'comparison_type'")))?;
    let ty = ComparisonType::parse(ty_str)
        .ok_or_else(|| schema(format!("rule '{key}': unknown comparison_type '{ty_str}'")))?;
    let cmp_str = comparison
        .and_then(Value::as_str)
        .ok_or_else(|| schema(format!("rule '{key}': missing or non-string 'comparison'")))?;
    let cmp = Comparison::parse_for(ty, cmp_str)?;

    let operand = match (value, field) {
        (Some(_), Some(_)) => {
            return Err(schema(format!("rule '{key}': 'value' and 'field' are mutually exclusive")))
        }
        (None, None) => {
            return Err(schema(format!("rule '{key}': one of 'value' or 'field' is required")))
        }
        (None, Some(f)) => {
            let fref = f
                .as_str()
                .ok_or_else(|| schema(format!("rule '{key}': 'field' must be a string")))?;
            let qname = QualifiedName::parse(fref)?;
            if qname.entity != target.entity.opposite() {
                return Err(schema(format!(
                    "rule '{key}': field reference '{fref}' must name the opposite entity"
                )));
            }
            Operand::FieldRef(qname.attr)
        }
        (Some(v), None) => parse_literal_operand(key, ty, cmp, v)?,
    };

    Ok(Rule {
        target,
        comparison_type: ty,
        comparison: cmp,
        operand,
    })
}

fn parse_literal_operand(
    key: &str,
    ty: ComparisonType,
    cmp: Comparison,
    v: &Value,
) -> Result<Operand, PolicyError> {
    let operand = match ty {
        ComparisonType::Boolean => match v {
            Value::Bool(b) => Operand::Literal(AttributeValue::Bool(*b)),
            _ => return Err(schema(format!("rule '{key}': boolean comparison needs a boolean 'value'"))),
        },
        ComparisonType::Numeric => match v {
            Value::Number(n) => {
                let d = BigDecimal::from_str(&n.to_string())
                    .map_err(|_| schema(format!("rule '{key}': unreadable number")))?;
                Operand::Literal(AttributeValue::Numeric(d))
            }
            _ => return Err(schema(format!("rule '{key}': numeric comparison needs a number 'value'"))),
        },
        ComparisonType::String => match v {
            Value::String(s) => Operand::Literal(AttributeValue::Text(s.clone())),
            _ => return Err(schema(format!("rule '{key}': string comparison needs a string 'value'"))),
        },
        ComparisonType::Datetime => match v {
            Value::String(s) => {
                if let Some(d) = DurationSpec::parse(s) {
                    if cmp != Comparison::IsMoreRecentThan {
                        return Err(schema(format!(
                            "rule '{key}': duration operands are only valid with 'isMoreRecentThan'"
                        )));
                    }
                    Operand::Duration(d)
                } else if datetime_shape(s) {
                    Operand::Literal(AttributeValue::DateTime(parse_datetime(s)?))
                } else {
                    return Err(schema(format!(
                        "rule '{key}': datetime 'value' must be ISO-8601 or a duration like '1DAY'"
                    )));
                }
            }
            _ => return Err(schema(format!("rule '{key}': datetime comparison needs a string 'value'"))),
        },
    };
    Ok(operand)
}

/// Parse a policy document.
pub fn parse_policy(document: &str) -> Result<Policy, PolicyError> {
    parse_policy_value(&parse_json(document)?)
}

/// Same as [`parse_policy`] but over an already-parsed JSON value.
pub fn parse_policy_value(doc: &Value) -> Result<Policy, PolicyError> {
    let obj = as_object(doc, "policy document")?;

    let policy_id = obj
        .get("policyID")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("missing or non-string 'policyID'"))?;
    if policy_id.is_empty() {
        return Err(schema("'policyID' must be non-empty"));
    }

    let (subject_attributes, object_attributes) = match obj.get("attributes") {
        None => (BTreeSet::new(), BTreeSet::new()),
        Some(attrs) => {
            let attrs = as_object(attrs, "'attributes'")?;
            for key in attrs.keys() {
                if key != "user" && key != "resource" {
                    return Err(schema(format!("unknown key 'attributes.{key}' (expected user/resource)")));
                }
            }
            (
                parse_attr_name_set(attrs.get("user"), "user")?,
                parse_attr_name_set(attrs.get("resource"), "resource")?,
            )
        }
    };

    let rules_value = obj.get("rules").ok_or_else(|| schema("missing 'rules' object"))?;
    let rules_obj = as_object(rules_value, "'rules'")?;

    let mut rules = IndexMap::new();
    for (key, body) in rules_obj {
        let rule = parse_rule(key, body)?;
        rules.insert(key.clone(), rule);
    }

    let policy = Policy {
        policy_id: policy_id.to_string(),
        subject_attributes,
        object_attributes,
        rules,
    };

    // Every attribute a rule touches must be declared determinative.
    let declared: BTreeSet<&String> = policy
        .subject_attributes
        .iter()
        .chain(policy.object_attributes.iter())
        .collect();
    for (key, rule) in &policy.rules {
        if !declared.contains(&rule.target.attr) {
            return Err(schema(format!(
                "rule '{key}' targets undeclared attribute '{}'",
                rule.target.attr
            )));
        }
        if let Operand::FieldRef(attr) = &rule.operand {
            if !declared.contains(attr) {
                return Err(schema(format!(
                    "rule '{key}' references undeclared attribute '{attr}'"
                )));
            }
        }
    }

    Ok(policy)
}

/// Render a policy back to its document form.
pub fn policy_to_json(policy: &Policy) -> Value {
    fn name_set(set: &BTreeSet<String>) -> Value {
        let mut m = Map::new();
        for name in set {
            m.insert(name.clone(), Value::String(String::new()));
        }
        Value::Object(m)
    }

    let mut rules = Map::new();
    for (key, rule) in &policy.rules {
        let mut body = Map::new();
        body.insert(
            "comparison_type".to_string(),
            Value::String(rule.comparison_type.name().to_string()),
        );
        body.insert(
            "comparison".to_string(),
            Value::String(rule.comparison.name().to_string()),
        );
        match &rule.operand {
            Operand::Literal(v) => {
                body.insert("value".to_string(), v.to_json());
            }
            Operand::Duration(d) => {
                body.insert("value".to_string(), Value::String(d.to_string()));
            }
            Operand::FieldRef(attr) => {
                body.insert(
                    "field".to_string(),
                    Value::String(format!("{}.{}", rule.target.entity.opposite().rule_prefix(), attr)),
                );
            }
        }
        rules.insert(key.clone(), Value::Object(body));
    }

    let mut attributes = Map::new();
    attributes.insert("user".to_string(), name_set(&policy.subject_attributes));
    attributes.insert("resource".to_string(), name_set(&policy.object_attributes));

    let mut doc = Map::new();
    doc.insert("policyID".to_string(), Value::String(policy.policy_id.clone()));
    doc.insert("attributes".to_string(), Value::Object(attributes));
    doc.insert("rules".to_string(), Value::Object(rules));
    Value::Object(doc)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate a single rule given the target's value and the opposite record
/// for field references. Total: every failure mode is `false`.
pub fn compare(
    rule: &Rule,
    target_value: &AttributeValue,
    opposite_record: &AttributeRecord,
    ctx: &EvaluationContext,
) -> bool {
    if !target_value.matches_type(rule.comparison_type) {
        return false;
    }
    let operand = match &rule.operand {
        Operand::Literal(v) => v.clone(),
        Operand::Duration(d) => AttributeValue::DateTime(ctx.clock + d.to_chrono()),
        Operand::FieldRef(attr) => match opposite_record.attributes.get(attr) {
            Some(v) => v.clone(),
            None => return false,
        },
    };
    if !operand.matches_type(rule.comparison_type) {
        return false;
    }
    match (rule.comparison, target_value, &operand) {
        (Comparison::BoolAnd, AttributeValue::Bool(a), AttributeValue::Bool(b)) => a == b,
        (Comparison::IsStrictlyEqual, AttributeValue::Numeric(a), AttributeValue::Numeric(b)) => a == b,
        (Comparison::IsLessThan, AttributeValue::Numeric(a), AttributeValue::Numeric(b)) => a < b,
        (Comparison::IsGreaterThan, AttributeValue::Numeric(a), AttributeValue::Numeric(b)) => a > b,
        (Comparison::IsStrictlyEqual, AttributeValue::Text(a), AttributeValue::Text(b)) => a == b,
        (Comparison::IsMoreRecentThan, AttributeValue::DateTime(a), AttributeValue::DateTime(b)) => a > b,
        (Comparison::IsOlderThan, AttributeValue::DateTime(a), AttributeValue::DateTime(b)) => a < b,
        _ => false,
    }
}

/// Evaluate a policy as the conjunction of its rules. Pure: the decision
/// depends only on the four arguments.
pub fn evaluate(
    policy: &Policy,
    subject: &AttributeRecord,
    object: &AttributeRecord,
    ctx: &EvaluationContext,
) -> Decision {
    let mut failed_rules = Vec::new();
    for (key, rule) in &policy.rules {
        let (record, opposite) = match rule.target.entity {
            EntityKind::Subject => (subject, object),
            EntityKind::Object => (object, subject),
        };
        let holds = match record.attributes.get(&rule.target.attr) {
            Some(value) => compare(rule, value, opposite, ctx),
            None => false,
        };
        if !holds {
            failed_rules.push(key.clone());
        }
    }
    Decision {
        outcome: if failed_rules.is_empty() {
            Outcome::Permit
        } else {
            Outcome::Deny
        },
        failed_rules,
    }
}
